//! Training loops: puzzle pretraining, action fine-tuning or linear
//! probing, sliding-window video evaluation, and score ensembling.
//!
//! Batches are drawn through stateless per-step random streams keyed by
//! `(seed, domain, step, index)`, so step `k` sees the same batch whether
//! the run started at step 0 or resumed from a checkpoint, and regardless
//! of worker count. Combined with the fixed-order accumulation in the ops
//! layer this makes whole runs bit-reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::dataset::{finetune_sample, sliding_window_clips, FinetuneAug, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::network::{
    action_backward, action_forward, add_action_head, add_puzzle_head, build_backbone,
    copy_backbone, puzzle_loss_and_grads, BackboneConfig, BnBuffers, tower_forward,
};
use crate::ops::{
    linear_backward, linear_forward, softmax, softmax_cross_entropy, top1_accuracy, BnState, Phase,
};
use crate::params::{sgd_step, Grads, NetworkParams, SgdConfig};
use crate::rng::{domain, stream};
use crate::sampler::{make_puzzle_sample, AblationFlags, GeometryConfig, PuzzleConfig, PuzzleSample};
use crate::tensor::Tensor;
use crate::F;

/// Which grid axis the pretext tuples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    StPuzzle,
    SPuzzle,
    TPuzzle,
}

impl Task {
    /// ST draws both tuple kinds evenly; S and T are single-axis.
    pub fn mode_prob_spatial(self) -> f64 {
        match self {
            Task::StPuzzle => 0.5,
            Task::SPuzzle => 1.0,
            Task::TPuzzle => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::StPuzzle => "st",
            Task::SPuzzle => "s",
            Task::TPuzzle => "t",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "st" => Ok(Task::StPuzzle),
            "s" => Ok(Task::SPuzzle),
            "t" => Ok(Task::TPuzzle),
            other => Err(Error::config(format!("unknown task '{other}' (want st, s, or t)"))),
        }
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub flags: AblationFlags,
    /// Flip probability when the upside-down augmentation is on.
    pub flip_prob: f64,
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must be in [0,1]"));
        }
        Ok(())
    }

    pub fn puzzle_config(&self, geometry: &GeometryConfig) -> PuzzleConfig {
        PuzzleConfig {
            geometry: *geometry,
            mode_prob_spatial: self.task.mode_prob_spatial(),
            flip_prob: self.flip_prob,
            flags: self.flags,
        }
    }

    pub fn num_classes(&self, geometry: &GeometryConfig) -> usize {
        self.puzzle_config(geometry).num_classes()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Stacks puzzle samples into the position-major crop batch the network
/// expects: crop `p` of sample `n` lands at row `p*N + n`. Returns the batch
/// and one class id per sample.
pub fn stack_puzzle_batch(batch: &[PuzzleSample]) -> Result<(Tensor<F>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::config("empty puzzle batch"));
    }
    let crop_shape = batch[0].crops[0].shape().to_vec();
    let n = batch.len();
    let plane: usize = crop_shape.iter().product();
    let mut shape = vec![4 * n];
    shape.extend_from_slice(&crop_shape);
    let mut out = Tensor::<F>::zeros(&shape);
    {
        let dst = out.data_mut();
        for (i, sample) in batch.iter().enumerate() {
            for (p, crop) in sample.crops.iter().enumerate() {
                if crop.shape() != crop_shape.as_slice() {
                    return Err(Error::shape(format!(
                        "sample {i} crop {p} has shape {:?}, batch uses {:?}",
                        crop.shape(),
                        crop_shape
                    )));
                }
                let row = p * n + i;
                dst[row * plane..(row + 1) * plane].copy_from_slice(crop.data());
            }
        }
    }
    let labels = batch.iter().map(|s| s.label.class_id()).collect();
    Ok((out, labels))
}

/// Draws one pretraining batch. Sample `i` of step `k` comes from its own
/// random stream, so the batch is independent of worker count and of where
/// the run started.
pub fn draw_pretrain_batch(
    clips: &[VideoClip],
    cfg: &PuzzleConfig,
    seed: u64,
    step: u64,
    batch_size: usize,
) -> Result<Vec<PuzzleSample>> {
    if clips.is_empty() {
        return Err(Error::config("pretraining needs at least one clip"));
    }
    (0..batch_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream([seed, domain::PUZZLE, step, i as u64]);
            let idx = rng.gen_range(0..clips.len());
            make_puzzle_sample(&clips[idx], cfg, &mut rng)
        })
        .collect()
}

/// One optimization step over a puzzle batch; returns (loss, top-1).
pub fn pretrain_step(
    bb_cfg: &BackboneConfig,
    params: &mut NetworkParams<F>,
    buffers: &mut BnBuffers<F>,
    batch: &[PuzzleSample],
    sgd: &SgdConfig,
) -> Result<(f64, f64)> {
    let (crops, labels) = stack_puzzle_batch(batch)?;
    let (loss, logits, grads) =
        puzzle_loss_and_grads(bb_cfg, params, buffers, &crops, &labels, Phase::Train, true)?;
    let top1 = top1_accuracy(&logits, &labels)?;
    sgd_step(params, &grads.expect("grads requested"), sgd)?;
    Ok((loss, top1))
}

/// Loss and top-1 over a fixed sample set with frozen parameters and
/// statistics (eval phase, chunked).
pub fn puzzle_eval(
    bb_cfg: &BackboneConfig,
    params: &NetworkParams<F>,
    buffers: &BnBuffers<F>,
    samples: &[PuzzleSample],
    chunk: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() || chunk == 0 {
        return Err(Error::config("puzzle_eval needs samples and a positive chunk size"));
    }
    let mut buf = buffers.clone();
    let (mut loss_sum, mut hits, mut total) = (0.0, 0.0, 0usize);
    for group in samples.chunks(chunk) {
        let (crops, labels) = stack_puzzle_batch(group)?;
        let (loss, logits, _) =
            puzzle_loss_and_grads(bb_cfg, params, &mut buf, &crops, &labels, Phase::Eval, false)?;
        let top1 = top1_accuracy(&logits, &labels)?;
        loss_sum += loss * group.len() as f64;
        hits += top1 * group.len() as f64;
        total += group.len();
    }
    Ok((loss_sum / total as f64, hits / total as f64))
}

/// Result of a pretraining run: the trained network plus artifact paths.
#[derive(Debug)]
pub struct PretrainOutput {
    pub params: NetworkParams<F>,
    pub buffers: BnBuffers<F>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last_loss: f64,
    pub last_top1: f64,
}

fn check_resume_meta(
    meta: &CheckpointMeta,
    bb_cfg: &BackboneConfig,
    geometry: &GeometryConfig,
    num_classes: usize,
    steps: u64,
) -> Result<()> {
    if meta.variant != bb_cfg.variant
        || meta.geometry != *geometry
        || meta.num_classes as usize != num_classes
        || meta.head_width as usize != bb_cfg.head_width
    {
        return Err(Error::state(
            "resume checkpoint disagrees with the run configuration",
        ));
    }
    if meta.step > steps {
        return Err(Error::state(format!(
            "resume checkpoint is at step {} but the run ends at {steps}",
            meta.step
        )));
    }
    Ok(())
}

/// Full pretraining loop: periodic metrics rows (split `train`) and a
/// rolling checkpoint every `eval_every` steps. With `resume` set and a
/// checkpoint present in `out_dir`, continues from its recorded step;
/// batches are step-keyed, so the continuation is bit-identical to an
/// uninterrupted run. `deterministic` zeroes the wall-clock column.
pub fn pretrain_run(
    clips: &[VideoClip],
    bb_cfg: &BackboneConfig,
    geometry: &GeometryConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    deterministic: bool,
    resume: bool,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    bb_cfg.validate()?;
    geometry.validate()?;
    let puzzle_cfg = cfg.puzzle_config(geometry);
    puzzle_cfg.validate()?;
    let num_classes = puzzle_cfg.num_classes();
    fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let (mut params, mut buffers, start, mut writer) = if resume && ckpt_path.exists() {
        let (meta, p, b) = crate::checkpoint::load_checkpoint(&ckpt_path)?;
        check_resume_meta(&meta, bb_cfg, geometry, num_classes, cfg.steps)?;
        let writer = MetricsWriter::append_open(&metrics_path)?;
        (p, b, meta.step, writer)
    } else {
        let mut init_rng = stream([cfg.seed, domain::INIT, 0, 0]);
        let (mut p, b) = build_backbone::<F>(bb_cfg, &mut init_rng)?;
        add_puzzle_head(&mut p, bb_cfg, geometry.crop, num_classes, &mut init_rng)?;
        (p, b, 0, MetricsWriter::create(&metrics_path)?)
    };

    let sgd = cfg.sgd();
    let t0 = Instant::now();
    let (mut last_loss, mut last_top1) = (f64::NAN, f64::NAN);
    for step in start..cfg.steps {
        let batch = draw_pretrain_batch(clips, &puzzle_cfg, cfg.seed, step, cfg.batch_size)?;
        let (loss, top1) = pretrain_step(bb_cfg, &mut params, &mut buffers, &batch, &sgd)?;
        (last_loss, last_top1) = (loss, top1);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            writer.append(&MetricsRow {
                step: done,
                split: "train".into(),
                loss,
                top1,
                wall_ms: if deterministic { 0 } else { t0.elapsed().as_millis() as u64 },
            })?;
            let meta = CheckpointMeta {
                variant: bb_cfg.variant,
                geometry: *geometry,
                num_classes: num_classes as u32,
                head_width: bb_cfg.head_width as u32,
                step: done,
            };
            save_checkpoint(&ckpt_path, &meta, &params, &buffers)?;
        }
    }
    Ok(PretrainOutput {
        params,
        buffers,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        last_loss,
        last_top1,
    })
}

/// Fine-tune either everything or only the action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    Probe,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Full => "full",
            FinetuneMode::Probe => "probe",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(FinetuneMode::Full),
            "probe" => Ok(FinetuneMode::Probe),
            other => Err(Error::config(format!("unknown finetune mode '{other}' (want full or probe)"))),
        }
    }
}

/// Fine-tuning / probing hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub num_classes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum must be below 1"));
        }
        Ok(())
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Backbone initialization for fine-tuning.
pub enum InitSource<'a> {
    Random,
    Pretrained(&'a NetworkParams<F>, &'a BnBuffers<F>),
}

/// Result of a fine-tuning or probing run.
#[derive(Debug)]
pub struct FinetuneOutput {
    pub params: NetworkParams<F>,
    pub buffers: BnBuffers<F>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub train_top1: f64,
    pub test_top1: f64,
}

/// Constant, then divided by 10 after 60% of the step budget.
pub fn finetune_lr(base: f64, step: u64, total: u64) -> f64 {
    if 5 * step >= 3 * total {
        base / 10.0
    } else {
        base
    }
}

fn require_labels(clips: &[VideoClip], num_classes: usize, what: &str) -> Result<()> {
    for (i, clip) in clips.iter().enumerate() {
        match clip.label {
            Some(l) if l < num_classes => {}
            Some(l) => {
                return Err(Error::state(format!(
                    "{what} clip {i} has label {l}, outside {num_classes} classes"
                )))
            }
            None => return Err(Error::state(format!("{what} clip {i} has no label"))),
        }
    }
    Ok(())
}

fn stack_rows(xs: &[Tensor<F>]) -> Result<Tensor<F>> {
    if xs.is_empty() {
        return Err(Error::config("empty window batch"));
    }
    let inner = xs[0].shape().to_vec();
    let plane: usize = inner.iter().product();
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(&inner);
    let mut out = Tensor::<F>::zeros(&shape);
    for (i, x) in xs.iter().enumerate() {
        x.expect_shape(&inner, "window batch row")?;
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(x.data());
    }
    Ok(out)
}

/// Softmax scores averaged over a clip's sliding windows; the prediction is
/// the lowest-index argmax.
pub fn evaluate_video(
    bb_cfg: &BackboneConfig,
    params: &NetworkParams<F>,
    buffers: &BnBuffers<F>,
    geometry: &GeometryConfig,
    clip: &VideoClip,
) -> Result<(usize, Vec<f64>)> {
    let windows = sliding_window_clips(clip, geometry)?;
    let batch = stack_rows(&windows)?;
    let mut buf = buffers.clone();
    let (logits, _) = action_forward(bb_cfg, params, &mut buf, &batch, Phase::Eval)?;
    let probs = softmax(&logits)?;
    let k = probs[0].len();
    let mut scores = vec![0.0f64; k];
    for row in &probs {
        for (s, p) in scores.iter_mut().zip(row) {
            *s += p;
        }
    }
    for s in &mut scores {
        *s /= probs.len() as f64;
    }
    let mut pred = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[pred] {
            pred = i;
        }
    }
    Ok((pred, scores))
}

/// Elementwise mean of two score vectors; each must already be a
/// distribution (sums to 1 within 1e-5).
pub fn ensemble_scores(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "score lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (tag, v) in [("first", a), ("second", b)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::config(format!(
                "{tag} score vector sums to {sum}, not a distribution"
            )));
        }
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
}

/// Mean top-1 and mean negative log-likelihood of video-level predictions
/// over a labeled clip set.
pub fn eval_clip_set(
    bb_cfg: &BackboneConfig,
    params: &NetworkParams<F>,
    buffers: &BnBuffers<F>,
    geometry: &GeometryConfig,
    clips: &[VideoClip],
) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::config("empty evaluation clip set"));
    }
    let (mut hits, mut nll) = (0usize, 0.0f64);
    for clip in clips {
        let label = clip.label.ok_or_else(|| Error::state("evaluation clip without label"))?;
        let (pred, scores) = evaluate_video(bb_cfg, params, buffers, geometry, clip)?;
        if pred == label {
            hits += 1;
        }
        nll -= scores[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok((hits as f64 / clips.len() as f64, nll / clips.len() as f64))
}

/// Fine-tunes an action classifier. `Full` trains every tensor with live
/// augmentation; `Probe` freezes the backbone, re-estimates batch-norm
/// statistics on the training windows, and trains only the head on cached
/// eval-mode features (exact for a frozen backbone, and far cheaper).
pub fn finetune_run(
    train_clips: &[VideoClip],
    test_clips: &[VideoClip],
    bb_cfg: &BackboneConfig,
    geometry: &GeometryConfig,
    init: InitSource,
    cfg: &FinetuneConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    bb_cfg.validate()?;
    geometry.validate()?;
    if train_clips.is_empty() {
        return Err(Error::config("fine-tuning needs training clips"));
    }
    require_labels(train_clips, cfg.num_classes, "train")?;
    require_labels(test_clips, cfg.num_classes, "test")?;
    fs::create_dir_all(out_dir)?;

    let mut init_rng = stream([cfg.seed, domain::INIT, 1, 0]);
    let (mut params, mut buffers) = build_backbone::<F>(bb_cfg, &mut init_rng)?;
    add_action_head(&mut params, bb_cfg, cfg.num_classes, &mut init_rng)?;
    if let InitSource::Pretrained(src_params, src_buffers) = init {
        copy_backbone(src_params, src_buffers, &mut params, &mut buffers)?;
    }
    match cfg.mode {
        FinetuneMode::Full => finetune_full(
            train_clips, test_clips, bb_cfg, geometry, params, buffers, cfg, out_dir, deterministic,
        ),
        FinetuneMode::Probe => finetune_probe(
            train_clips, test_clips, bb_cfg, geometry, params, buffers, cfg, out_dir, deterministic,
        ),
    }
}

fn finetune_meta(bb_cfg: &BackboneConfig, geometry: &GeometryConfig, cfg: &FinetuneConfig, step: u64) -> CheckpointMeta {
    CheckpointMeta {
        variant: bb_cfg.variant,
        geometry: *geometry,
        num_classes: cfg.num_classes as u32,
        head_width: bb_cfg.head_width as u32,
        step,
    }
}

#[allow(clippy::too_many_arguments)]
fn finetune_full(
    train_clips: &[VideoClip],
    test_clips: &[VideoClip],
    bb_cfg: &BackboneConfig,
    geometry: &GeometryConfig,
    mut params: NetworkParams<F>,
    mut buffers: BnBuffers<F>,
    cfg: &FinetuneConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<FinetuneOutput> {
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let aug = FinetuneAug::full();
    let t0 = Instant::now();
    let wall = |det: bool| if det { 0 } else { t0.elapsed().as_millis() as u64 };
    let mut train_top1 = f64::NAN;
    for step in 0..cfg.steps {
        let drawn: Vec<(Tensor<F>, usize)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream([cfg.seed, domain::FINETUNE, step, i as u64]);
                let idx = rng.gen_range(0..train_clips.len());
                let clip = &train_clips[idx];
                let x = finetune_sample(clip, geometry, &aug, &mut rng)?;
                Ok((x, clip.label.expect("labels checked upfront")))
            })
            .collect::<Result<_>>()?;
        let windows: Vec<Tensor<F>> = drawn.iter().map(|(x, _)| x.clone()).collect();
        let labels: Vec<usize> = drawn.iter().map(|&(_, l)| l).collect();
        let batch = stack_rows(&windows)?;
        let (logits, trace) = action_forward(bb_cfg, &params, &mut buffers, &batch, Phase::Train)?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, &labels)?;
        let top1 = top1_accuracy(&logits, &labels)?;
        let mut grads = Grads::new();
        action_backward(bb_cfg, &params, &trace, &d_logits, false, &mut grads)?;
        sgd_step(&mut params, &grads, &cfg.sgd(finetune_lr(cfg.lr, step, cfg.steps)))?;
        train_top1 = top1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            writer.append(&MetricsRow {
                step: done,
                split: "train".into(),
                loss,
                top1,
                wall_ms: wall(deterministic),
            })?;
            save_checkpoint(&ckpt_path, &finetune_meta(bb_cfg, geometry, cfg, done), &params, &buffers)?;
        }
    }
    let test_top1 = if test_clips.is_empty() {
        f64::NAN
    } else {
        let (top1, nll) = eval_clip_set(bb_cfg, &params, &buffers, geometry, test_clips)?;
        writer.append(&MetricsRow {
            step: cfg.steps,
            split: "test".into(),
            loss: nll,
            top1,
            wall_ms: wall(deterministic),
        })?;
        top1
    };
    save_checkpoint(&ckpt_path, &finetune_meta(bb_cfg, geometry, cfg, cfg.steps), &params, &buffers)?;
    Ok(FinetuneOutput {
        params,
        buffers,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        train_top1,
        test_top1,
    })
}

/// All training windows of a clip set, with labels, in index order.
fn collect_windows(
    clips: &[VideoClip],
    geometry: &GeometryConfig,
) -> Result<(Vec<Tensor<F>>, Vec<usize>)> {
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for clip in clips {
        let label = clip.label.expect("labels checked upfront");
        for w in sliding_window_clips(clip, geometry)? {
            windows.push(w);
            labels.push(label);
        }
    }
    if windows.is_empty() {
        return Err(Error::config("no training windows"));
    }
    Ok((windows, labels))
}

#[allow(clippy::too_many_arguments)]
fn finetune_probe(
    train_clips: &[VideoClip],
    test_clips: &[VideoClip],
    bb_cfg: &BackboneConfig,
    geometry: &GeometryConfig,
    mut params: NetworkParams<F>,
    mut buffers: BnBuffers<F>,
    cfg: &FinetuneConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<FinetuneOutput> {
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let t0 = Instant::now();
    let wall = |det: bool| if det { 0 } else { t0.elapsed().as_millis() as u64 };
    params.set_frozen(|name| !name.starts_with("action."));

    // Re-estimate batch-norm statistics on the window distribution (one
    // train-phase pass, both init kinds) so the two arms are comparable.
    let (windows, labels) = collect_windows(train_clips, geometry)?;
    for (_, state) in buffers.iter_mut() {
        *state = BnState::new(state.running_mean.dim(0));
    }
    let warm = cfg.batch_size.max(8);
    for group in windows.chunks(warm) {
        let batch = stack_rows(group)?;
        tower_forward(bb_cfg, &params, &mut buffers, &batch, Phase::Train)?;
    }

    // Frozen backbone: features are constants, so extract once in eval mode.
    let d = bb_cfg.feature_dim();
    let mut features = Tensor::<F>::zeros(&[windows.len(), d]);
    for (start, group) in windows.chunks(warm).enumerate().map(|(gi, g)| (gi * warm, g)) {
        let batch = stack_rows(group)?;
        let (f, _) = tower_forward(bb_cfg, &params, &mut buffers, &batch, Phase::Eval)?;
        features.data_mut()[start * d..(start + group.len()) * d].copy_from_slice(f.data());
    }

    let mut head = NetworkParams::<F>::new();
    head.insert("action.fc.weight", params.get("action.fc.weight")?.clone(), false)?;
    head.insert("action.fc.bias", params.get("action.fc.bias")?.clone(), true)?;
    let gather = |rows: &[usize]| -> (Tensor<F>, Vec<usize>) {
        let mut x = Tensor::<F>::zeros(&[rows.len(), d]);
        for (i, &r) in rows.iter().enumerate() {
            x.data_mut()[i * d..(i + 1) * d].copy_from_slice(&features.data()[r * d..(r + 1) * d]);
        }
        (x, rows.iter().map(|&r| labels[r]).collect())
    };
    for step in 0..cfg.steps {
        let mut rng = stream([cfg.seed, domain::FINETUNE, step, 0]);
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..windows.len())).collect();
        let (x, y) = gather(&rows);
        let logits = linear_forward(&x, head.get("action.fc.weight")?, head.get("action.fc.bias")?)?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, &y)?;
        let top1 = top1_accuracy(&logits, &y)?;
        let lg = linear_backward(&x, head.get("action.fc.weight")?, &d_logits)?;
        let mut grads = Grads::new();
        grads.accumulate("action.fc.weight", lg.weight)?;
        grads.accumulate("action.fc.bias", lg.bias)?;
        sgd_step(&mut head, &grads, &cfg.sgd(finetune_lr(cfg.lr, step, cfg.steps)))?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            writer.append(&MetricsRow {
                step: done,
                split: "train".into(),
                loss,
                top1,
                wall_ms: wall(deterministic),
            })?;
        }
    }
    *params.get_mut("action.fc.weight")? = head.get("action.fc.weight")?.clone();
    *params.get_mut("action.fc.bias")? = head.get("action.fc.bias")?.clone();

    // Train accuracy over all cached windows at the final head.
    let all_rows: Vec<usize> = (0..windows.len()).collect();
    let (x, y) = gather(&all_rows);
    let logits = linear_forward(&x, params.get("action.fc.weight")?, params.get("action.fc.bias")?)?;
    let train_top1 = top1_accuracy(&logits, &y)?;

    let (test_top1, test_nll) = if test_clips.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        eval_clip_set(bb_cfg, &params, &buffers, geometry, test_clips)?
    };
    if !test_clips.is_empty() {
        writer.append(&MetricsRow {
            step: cfg.steps,
            split: "test".into(),
            loss: test_nll,
            top1: test_top1,
            wall_ms: wall(deterministic),
        })?;
    }
    save_checkpoint(&ckpt_path, &finetune_meta(bb_cfg, geometry, cfg, cfg.steps), &params, &buffers)?;
    Ok(FinetuneOutput {
        params,
        buffers,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        train_top1,
        test_top1,
    })
}
