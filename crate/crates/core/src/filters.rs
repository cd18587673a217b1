//! Renders first-layer convolution kernels as image files: one image per
//! filter with its temporal slices tiled left to right, plus a montage of
//! all filters. Binary portable graymap/pixmap output, max value 255.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;
use crate::F;

/// Flat interleaved 8-bit image, 1 (gray) or 3 (rgb) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl FilterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("image extents must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("{channels} channels (want 1 or 3)")));
        }
        Ok(FilterImage {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        })
    }

    fn put(&mut self, x: usize, y: usize, value: &[u8]) {
        let base = (y * self.width + x) * self.channels;
        self.pixels[base..base + self.channels].copy_from_slice(value);
    }

    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }
}

/// Values whose spread falls below this render as flat mid-gray.
const FLAT_SPAN: f64 = 1e-12;

fn quantize(unit: f64) -> u8 {
    (unit.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one filter of a conv weight `[out, in, kt, kh, kw]` with its
/// `kt` temporal slices side by side, min-max normalized over the whole
/// filter. A constant filter maps to uniform mid-gray. Three input
/// channels render as rgb; anything else renders the channel mean as gray.
/// `scale` is an integer pixel upsampling factor.
pub fn render_filter(weight: &Tensor<F>, filter: usize, scale: usize) -> Result<FilterImage> {
    weight.expect_rank(5, "conv weight")?;
    if scale == 0 {
        return Err(Error::config("scale must be positive"));
    }
    let (out_ch, in_ch) = (weight.dim(0), weight.dim(1));
    if filter >= out_ch {
        return Err(Error::config(format!("filter {filter} out of {out_ch}")));
    }
    let (kt, kh, kw) = (weight.dim(2), weight.dim(3), weight.dim(4));
    let plane = in_ch * kt * kh * kw;
    let vals: Vec<f64> = weight.data()[filter * plane..(filter + 1) * plane]
        .iter()
        .map(|v| *v as f64)
        .collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let unit = |v: f64| if span < FLAT_SPAN { 0.5 } else { (v - min) / span };

    let channels = if in_ch == 3 { 3 } else { 1 };
    let mut img = FilterImage::new(kt * kw * scale, kh * scale, channels)?;
    for y in 0..img.height {
        for x in 0..img.width {
            let t = x / (kw * scale);
            let wx = (x % (kw * scale)) / scale;
            let wy = y / scale;
            let sample = |c: usize| vals[((c * kt + t) * kh + wy) * kw + wx];
            let px: Vec<u8> = if channels == 3 {
                (0..3).map(|c| quantize(unit(sample(c)))).collect()
            } else {
                let mean = (0..in_ch).map(sample).sum::<f64>() / in_ch as f64;
                vec![quantize(unit(mean))]
            };
            img.put(x, y, &px);
        }
    }
    Ok(img)
}

/// Tiles equally sized images into a near-square grid with a black gap of
/// `gap` pixels between cells.
pub fn montage(tiles: &[FilterImage], gap: usize) -> Result<FilterImage> {
    if tiles.is_empty() {
        return Err(Error::config("montage needs at least one tile"));
    }
    let (w, h, c) = (tiles[0].width, tiles[0].height, tiles[0].channels);
    for (i, t) in tiles.iter().enumerate() {
        if t.width != w || t.height != h || t.channels != c {
            return Err(Error::shape(format!("tile {i} does not match tile 0")));
        }
    }
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let mut img = FilterImage::new(cols * w + (cols - 1) * gap, rows * h + (rows - 1) * gap, c)?;
    for (i, tile) in tiles.iter().enumerate() {
        let (row, col) = (i / cols, i % cols);
        let (x0, y0) = (col * (w + gap), row * (h + gap));
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * c;
                img.put(x0 + x, y0 + y, &tile.pixels[base..base + c]);
            }
        }
    }
    Ok(img)
}

/// Writes binary P5 (gray) or P6 (rgb) with max value 255.
pub fn write_image(path: &Path, img: &FilterImage) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Paths produced by a filter export.
#[derive(Debug)]
pub struct ExportedFilters {
    pub filters: Vec<PathBuf>,
    pub montage: PathBuf,
}

/// Renders every first-layer filter of `params` into `out_dir` as
/// `filter_NNN` images plus `montage`. Output is a pure function of the
/// weights.
pub fn export_conv1_filters(
    params: &NetworkParams<F>,
    out_dir: &Path,
    scale: usize,
) -> Result<ExportedFilters> {
    let weight = params.get("conv1.weight")?;
    fs::create_dir_all(out_dir)?;
    let n = weight.dim(0);
    let mut tiles = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for f in 0..n {
        let img = render_filter(weight, f, scale)?;
        let path = out_dir.join(format!("filter_{f:03}.{}", img.extension()));
        write_image(&path, &img)?;
        paths.push(path);
        tiles.push(img);
    }
    let big = montage(&tiles, scale.max(1))?;
    let montage_path = out_dir.join(format!("montage.{}", big.extension()));
    write_image(&montage_path, &big)?;
    Ok(ExportedFilters {
        filters: paths,
        montage: montage_path,
    })
}
