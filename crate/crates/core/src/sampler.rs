//! Puzzle sample generation.
//!
//! A clip is divided into a fixed 2(H) x 2(W) x 4(T) grid of cells. A sample
//! takes four cells along one axis group (a 2x2x1 spatial slice or a 1x1x4
//! temporal column), cuts a jittered crop from each, optionally replicates
//! one color channel, shuffles the crops by a random permutation, optionally
//! flips everything upside-down, and labels the result with the permutation
//! rank (+24 if flipped).
//!
//! Sampling splits into [`sample_layout`] (all random draws) and
//! [`realize_layout`] (pure pixel work), so tests can pin any part of the
//! layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::VideoClip;
use crate::error::{Error, Result};
use crate::perm::{class_id, perm_unrank, NUM_PERMS};
use crate::tensor::Tensor;
use crate::F;

/// Grid extents, fixed by the method: 2x2 in space, 4 in time.
pub const GRID_T: usize = 4;
pub const GRID_H: usize = 2;
pub const GRID_W: usize = 2;

/// Spatial/temporal drawing geometry. Tuples are `(t, h, w)`, matching
/// tensor axis order; the full clip extent is the cell extent times the
/// fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometryConfig {
    pub cell: (usize, usize, usize),
    pub crop: (usize, usize, usize),
    pub finetune_frames: usize,
    pub finetune_size: usize,
}

impl GeometryConfig {
    /// Full-size geometry: 128-frame 224x224 clips, 32x112x112 cells,
    /// 16x80x80 crops, 16-frame 112px fine-tuning windows.
    pub fn paper() -> Self {
        GeometryConfig {
            cell: (32, 112, 112),
            crop: (16, 80, 80),
            finetune_frames: 16,
            finetune_size: 112,
        }
    }

    /// CPU-tractable geometry: 32-frame 56x56 clips, 8x28x28 cells,
    /// 4x20x20 crops, 8-frame 28px fine-tuning windows.
    pub fn desk() -> Self {
        GeometryConfig {
            cell: (8, 28, 28),
            crop: (4, 20, 20),
            finetune_frames: 8,
            finetune_size: 28,
        }
    }

    pub fn clip_frames(&self) -> usize {
        self.cell.0 * GRID_T
    }
    pub fn clip_height(&self) -> usize {
        self.cell.1 * GRID_H
    }
    pub fn clip_width(&self) -> usize {
        self.cell.2 * GRID_W
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |c: usize, k: usize| c >= 1 && k >= 1 && k <= c;
        if !(ok(self.cell.0, self.crop.0) && ok(self.cell.1, self.crop.1) && ok(self.cell.2, self.crop.2))
        {
            return Err(Error::config(format!(
                "crop {:?} must be positive and fit inside cell {:?}",
                self.crop, self.cell
            )));
        }
        if self.finetune_frames == 0 || self.finetune_frames > self.clip_frames() {
            return Err(Error::config(format!(
                "finetune_frames {} must be in [1, {}]",
                self.finetune_frames,
                self.clip_frames()
            )));
        }
        if self.finetune_size == 0 {
            return Err(Error::config("finetune_size must be positive"));
        }
        Ok(())
    }

    /// Errors unless the clip extents equal this geometry exactly.
    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.frames != self.clip_frames()
            || clip.height != self.clip_height()
            || clip.width != self.clip_width()
        {
            return Err(Error::shape(format!(
                "clip {}x{}x{} does not match geometry {}x{}x{}",
                clip.frames,
                clip.height,
                clip.width,
                self.clip_frames(),
                self.clip_height(),
                self.clip_width()
            )));
        }
        Ok(())
    }
}

/// Which grid axis the 4-cell tuple runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TupleMode {
    Spatial,
    Temporal,
}

/// Anti-shortcut toggles. `rwc` is the upside-down flip with class doubling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub jitter: bool,
    pub channel_replication: bool,
    pub rwc: bool,
}

impl AblationFlags {
    pub fn all_on() -> Self {
        AblationFlags {
            jitter: true,
            channel_replication: true,
            rwc: true,
        }
    }
    pub fn all_off() -> Self {
        AblationFlags {
            jitter: false,
            channel_replication: false,
            rwc: false,
        }
    }
}

/// Everything the sampler needs besides the clip and the rng.
#[derive(Debug, Clone, Copy)]
pub struct PuzzleConfig {
    pub geometry: GeometryConfig,
    /// Probability of drawing a spatial tuple (1.0 = S-puzzle, 0.0 =
    /// T-puzzle, 0.5 = ST-puzzle).
    pub mode_prob_spatial: f64,
    /// Flip probability when `flags.rwc` is set; ignored otherwise.
    pub flip_prob: f64,
    pub flags: AblationFlags,
}

impl PuzzleConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        for (name, p) in [
            ("mode_prob_spatial", self.mode_prob_spatial),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(Error::config(format!("{name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        if self.flags.rwc {
            2 * NUM_PERMS
        } else {
            NUM_PERMS
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PuzzleLabel {
    pub perm_rank: usize,
    pub flipped: bool,
}

impl PuzzleLabel {
    pub fn class_id(&self) -> usize {
        class_id(self.perm_rank, self.flipped).expect("rank checked at construction")
    }
}

/// All random choices of one sample, in canonical cell order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleLayout {
    pub mode: TupleMode,
    /// Cell grid coordinates `(t, h, w)` in canonical order.
    pub cells: [(usize, usize, usize); 4],
    /// Within-cell crop offsets `(t, h, w)` per canonical cell.
    pub offsets: [(usize, usize, usize); 4],
    /// Replicated channel per canonical cell, if replication is on.
    pub channels: Option<[usize; 4]>,
    pub rank: usize,
    pub flipped: bool,
}

/// Four permuted crops plus the label. Crop `i` of the emitted tuple came
/// from canonical cell `perm(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PuzzleSample {
    pub crops: [Tensor<F>; 4],
    pub label: PuzzleLabel,
    pub mode: TupleMode,
}

/// Canonical 4-cell group for a mode: spatial tuples enumerate (h, w)
/// row-major at one temporal index, temporal tuples ascend t at one spatial
/// position.
pub fn select_tuple_cells(mode: TupleMode, rng: &mut ChaCha8Rng) -> [(usize, usize, usize); 4] {
    match mode {
        TupleMode::Spatial => {
            let t = rng.gen_range(0..GRID_T);
            [(t, 0, 0), (t, 0, 1), (t, 1, 0), (t, 1, 1)]
        }
        TupleMode::Temporal => {
            let pos = rng.gen_range(0..GRID_H * GRID_W);
            let (h, w) = (pos / GRID_W, pos % GRID_W);
            [(0, h, w), (1, h, w), (2, h, w), (3, h, w)]
        }
    }
}

/// Draws every random choice for one sample. Draw order: mode, cell
/// selector, per-cell jitter offsets (t, h, w), per-cell channel choices,
/// permutation rank, flip.
pub fn sample_layout(cfg: &PuzzleConfig, rng: &mut ChaCha8Rng) -> Result<PuzzleLayout> {
    cfg.validate()?;
    let mode = if rng.gen_bool(cfg.mode_prob_spatial) {
        TupleMode::Spatial
    } else {
        TupleMode::Temporal
    };
    let cells = select_tuple_cells(mode, rng);
    let g = cfg.geometry;
    let slack = (
        g.cell.0 - g.crop.0,
        g.cell.1 - g.crop.1,
        g.cell.2 - g.crop.2,
    );
    let mut offsets = [(0usize, 0usize, 0usize); 4];
    for o in &mut offsets {
        *o = if cfg.flags.jitter {
            (
                rng.gen_range(0..=slack.0),
                rng.gen_range(0..=slack.1),
                rng.gen_range(0..=slack.2),
            )
        } else {
            (slack.0 / 2, slack.1 / 2, slack.2 / 2)
        };
    }
    let channels = if cfg.flags.channel_replication {
        let mut ch = [0usize; 4];
        for c in &mut ch {
            *c = rng.gen_range(0..3);
        }
        Some(ch)
    } else {
        None
    };
    let rank = rng.gen_range(0..NUM_PERMS);
    let flipped = cfg.flags.rwc && cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    Ok(PuzzleLayout {
        mode,
        cells,
        offsets,
        channels,
        rank,
        flipped,
    })
}

/// Extracts one crop as `[3, cropT, cropH, cropW]`, scaled to [0,1].
fn extract_crop(
    clip: &VideoClip,
    g: &GeometryConfig,
    cell: (usize, usize, usize),
    offset: (usize, usize, usize),
) -> Tensor<F> {
    let (ct, ch, cw) = g.crop;
    let t0 = cell.0 * g.cell.0 + offset.0;
    let h0 = cell.1 * g.cell.1 + offset.1;
    let w0 = cell.2 * g.cell.2 + offset.2;
    let mut out = Tensor::<F>::zeros(&[3, ct, ch, cw]);
    let buf = out.data_mut();
    for c in 0..3 {
        for t in 0..ct {
            for h in 0..ch {
                let row = ((c * ct + t) * ch + h) * cw;
                for w in 0..cw {
                    buf[row + w] = clip.pixel(t0 + t, h0 + h, w0 + w, c) as F / 255.0;
                }
            }
        }
    }
    out
}

/// Copies channel `keep` over the other two. Errors unless the crop has
/// exactly 3 channels.
pub fn replicate_channel(crop: &mut Tensor<F>, keep: usize) -> Result<()> {
    crop.expect_rank(4, "channel replication crop")?;
    if crop.dim(0) != 3 {
        return Err(Error::shape(format!(
            "channel replication needs 3 channels, got {}",
            crop.dim(0)
        )));
    }
    if keep >= 3 {
        return Err(Error::config(format!("channel index {keep} out of range")));
    }
    let plane = crop.numel() / 3;
    let buf = crop.data_mut();
    for c in 0..3 {
        if c == keep {
            continue;
        }
        let (dst, src) = (c * plane, keep * plane);
        for i in 0..plane {
            buf[dst + i] = buf[src + i];
        }
    }
    Ok(())
}

/// Spec'd convenience wrapper: draws the channel uniformly, then replicates.
pub fn channel_replicate(crop: &mut Tensor<F>, rng: &mut ChaCha8Rng) -> Result<usize> {
    let keep = rng.gen_range(0..3);
    replicate_channel(crop, keep)?;
    Ok(keep)
}

/// Mirrors the height axis of a `[C, T, H, W]` crop in place.
pub fn flip_upside_down(crop: &mut Tensor<F>) {
    let (c, t, h, w) = (crop.dim(0), crop.dim(1), crop.dim(2), crop.dim(3));
    let buf = crop.data_mut();
    for ci in 0..c {
        for ti in 0..t {
            let vol = (ci * t + ti) * h * w;
            for hi in 0..h / 2 {
                let a = vol + hi * w;
                let b = vol + (h - 1 - hi) * w;
                for wi in 0..w {
                    buf.swap(a + wi, b + wi);
                }
            }
        }
    }
}

/// Pure pixel work for a fixed layout: extract, replicate, permute, flip,
/// normalize (subtract the mean over all four crops).
pub fn realize_layout(
    clip: &VideoClip,
    cfg: &PuzzleConfig,
    layout: &PuzzleLayout,
) -> Result<PuzzleSample> {
    cfg.geometry.check_clip(clip)?;
    if layout.rank >= NUM_PERMS {
        return Err(Error::config(format!("layout rank {} out of range", layout.rank)));
    }
    let perm = perm_unrank(layout.rank, 4)?;
    let g = cfg.geometry;
    let mut crops: Vec<Tensor<F>> = Vec::with_capacity(4);
    for i in 0..4 {
        let j = perm[i];
        let mut crop = extract_crop(clip, &g, layout.cells[j], layout.offsets[j]);
        if let Some(channels) = layout.channels {
            replicate_channel(&mut crop, channels[j])?;
        }
        if layout.flipped {
            flip_upside_down(&mut crop);
        }
        crops.push(crop);
    }
    let total: f64 = crops
        .iter()
        .map(|c| c.data().iter().map(|&v| v as f64).sum::<f64>())
        .sum();
    let mean = (total / (4 * crops[0].numel()) as f64) as F;
    for crop in &mut crops {
        crop.data_mut().iter_mut().for_each(|v| *v -= mean);
    }
    let [a, b, c, d] = <[Tensor<F>; 4]>::try_from(crops).expect("exactly four crops");
    Ok(PuzzleSample {
        crops: [a, b, c, d],
        label: PuzzleLabel {
            perm_rank: layout.rank,
            flipped: layout.flipped,
        },
        mode: layout.mode,
    })
}

/// Draws a layout and realizes it.
pub fn make_puzzle_sample(
    clip: &VideoClip,
    cfg: &PuzzleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PuzzleSample> {
    let layout = sample_layout(cfg, rng)?;
    realize_layout(clip, cfg, &layout)
}
