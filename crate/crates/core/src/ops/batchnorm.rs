//! Batch normalization over `[N, C, T, H, W]` (statistics per channel).
//!
//! Training normalizes with biased batch variance and folds the batch
//! statistics into the running estimates as
//! `running <- (1 - momentum) * running + momentum * batch`, storing the
//! unbiased variance. Evaluation consumes the running estimates and errors
//! if they were never updated.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::Phase;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running statistics for one batch-norm layer.
///
/// `batches` counts how many training batches have been folded in; zero means
/// the statistics are uninitialized and evaluation must be refused.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<S: Scalar> {
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub batches: u64,
}

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], S::one()),
            batches: 0,
        }
    }
}

/// Per-batch values needed by the backward pass. For eval-phase forwards the
/// fields hold the running statistics that were used.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub phase: Phase,
}

fn check_shapes<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<usize> {
    input.expect_rank(5, "batchnorm3d input")?;
    let c = input.dim(1);
    gamma.expect_shape(&[c], "batchnorm3d gamma")?;
    beta.expect_shape(&[c], "batchnorm3d beta")?;
    Ok(c)
}

/// Mean and biased variance per channel, accumulated in f64 with two passes.
fn channel_stats<S: Scalar>(input: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (input.dim(0), input.dim(1));
    let plane = input.dim(2) * input.dim(3) * input.dim(4);
    let count = (n * plane) as f64;
    let x = input.data();
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    sum += v.to_acc();
                }
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    let d = v.to_acc() - mean;
                    sq += d * d;
                }
            }
            (mean, sq / count)
        })
        .collect();
    (
        stats.iter().map(|s| s.0).collect(),
        stats.iter().map(|s| s.1).collect(),
    )
}

pub fn batchnorm3d_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    state: &mut BnState<S>,
    phase: Phase,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<S>, BnCache)> {
    let c = check_shapes(input, gamma, beta)?;
    state.running_mean.expect_shape(&[c], "batchnorm3d running mean")?;
    state.running_var.expect_shape(&[c], "batchnorm3d running var")?;
    let (n, plane) = (input.dim(0), input.dim(2) * input.dim(3) * input.dim(4));

    let (mean, var) = match phase {
        Phase::Train => {
            let (mean, var) = channel_stats(input);
            let count = (n * plane) as f64;
            // Unbiased variance goes into the running estimate; the biased
            // one normalizes the batch. A single-element batch has no
            // unbiased estimate, so fall back to the biased value.
            let correction = if count > 1.5 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = state.running_mean.data()[ch].to_acc();
                let rv = state.running_var.data()[ch].to_acc();
                state.running_mean.data_mut()[ch] =
                    S::from_acc((1.0 - momentum) * rm + momentum * mean[ch]);
                state.running_var.data_mut()[ch] =
                    S::from_acc((1.0 - momentum) * rv + momentum * var[ch] * correction);
            }
            state.batches += 1;
            (mean, var)
        }
        Phase::Eval => {
            if state.batches == 0 {
                return Err(Error::state(
                    "batchnorm3d: eval requested but running statistics were never updated",
                ));
            }
            (
                state.running_mean.data().iter().map(|v| v.to_acc()).collect(),
                state.running_var.data().iter().map(|v| v.to_acc()).collect(),
            )
        }
    };

    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    let g = gamma.data();
    let b = beta.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(task, plane_out)| {
            let ch = task % c;
            let base = task * plane;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let scale = g[ch].to_acc() * inv;
            let shift = b[ch].to_acc() - mean[ch] * scale;
            for (o, &v) in plane_out.iter_mut().zip(&x[base..base + plane]) {
                *o = S::from_acc(v.to_acc() * scale + shift);
            }
        });

    Ok((out, BnCache { mean, var, phase }))
}

pub struct BnGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn batchnorm3d_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    cache: &BnCache,
    eps: f64,
    d_out: &Tensor<S>,
) -> Result<BnGrads<S>> {
    input.expect_rank(5, "batchnorm3d input")?;
    d_out.expect_shape(input.shape(), "batchnorm3d d_out")?;
    let c = input.dim(1);
    gamma.expect_shape(&[c], "batchnorm3d gamma")?;
    let n = input.dim(0);
    let plane = input.dim(2) * input.dim(3) * input.dim(4);
    let count = (n * plane) as f64;
    let x = input.data();
    let go = d_out.data();

    // Channel reductions first (fixed order over n then plane). sum_dy is
    // d_beta and sum_dy_xhat is d_gamma.
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mean = cache.mean[ch];
            let inv = 1.0 / (cache.var[ch] + eps).sqrt();
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    let dy = go[base + i].to_acc();
                    let xhat = (x[base + i].to_acc() - mean) * inv;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            (sum_dy, sum_dy_xhat)
        })
        .collect();

    let mut d_input = Tensor::zeros(input.shape());
    let g = gamma.data();
    d_input
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(task, dx_plane)| {
            let ch = task % c;
            let base = task * plane;
            let mean = cache.mean[ch];
            let inv = 1.0 / (cache.var[ch] + eps).sqrt();
            let gv = g[ch].to_acc();
            match cache.phase {
                Phase::Train => {
                    let m_dy = sums[ch].0 / count;
                    let m_dy_xhat = sums[ch].1 / count;
                    for i in 0..plane {
                        let dy = go[base + i].to_acc();
                        let xhat = (x[base + i].to_acc() - mean) * inv;
                        dx_plane[i] = S::from_acc(gv * inv * (dy - m_dy - xhat * m_dy_xhat));
                    }
                }
                Phase::Eval => {
                    // Running statistics are constants, so the map is affine.
                    for i in 0..plane {
                        dx_plane[i] = S::from_acc(gv * inv * go[base + i].to_acc());
                    }
                }
            }
        });

    let d_gamma = Tensor::new(&[c], sums.iter().map(|s| S::from_acc(s.1)).collect())?;
    let d_beta = Tensor::new(&[c], sums.iter().map(|s| S::from_acc(s.0)).collect())?;
    Ok(BnGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    })
}
