//! Finite-difference verification of every backward pass.
//!
//! Each check compares an analytic gradient against a central difference of
//! the same scalar loss, in f64. Layer checks project the layer output onto
//! a fixed random tensor so any output element with a wrong gradient moves
//! the scalar; the whole-network check uses the real puzzle loss on the
//! tiny backbone. Relative error is `|a - n| / max(|a|, |n|)`, treated as
//! zero when both magnitudes sit below an absolute floor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{
    add_puzzle_head, build_backbone, puzzle_loss_and_grads, BackboneConfig, BnBuffers,
};
use crate::ops::{
    batchnorm3d_backward, batchnorm3d_forward, conv3d_backward, conv3d_forward, global_avgpool_backward,
    global_avgpool_forward, linear_backward, linear_forward, maxpool3d_backward, maxpool3d_forward,
    relu_backward, relu_forward, softmax_cross_entropy, BnState, ConvSpec, Phase,
};
use crate::params::NetworkParams;
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

/// Tolerance for single-layer checks.
pub const LAYER_TOL: f64 = 1e-3;
/// Tolerance for the whole-network check.
pub const NET_TOL: f64 = 1e-2;
/// Central-difference step; fine for f64 losses of order one.
const FD_EPS: f64 = 1e-6;
/// Gradients with both analytic and numeric magnitude below this count as
/// matching zeros.
const ZERO_ATOL: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let m = analytic.abs().max(numeric.abs());
    if m < ZERO_ATOL {
        0.0
    } else {
        (analytic - numeric).abs() / m
    }
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Outcomes across every requested seed.
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradCheckSummary {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass())
    }

    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.outcomes
            .iter()
            .max_by(|a, b| {
                (a.max_rel_err / a.tolerance)
                    .partial_cmp(&(b.max_rel_err / b.tolerance))
                    .expect("finite ratios")
            })
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// Uniform values bounded away from zero, for relu inputs and gamma.
fn uniform_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `loss` along coordinate `idx` of a tensor slot
/// owned by the closure caller.
fn central_diff(
    tensor: &mut Tensor<f64>,
    idx: usize,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    let orig = tensor.data()[idx];
    tensor.data_mut()[idx] = orig + FD_EPS;
    let up = loss(tensor)?;
    tensor.data_mut()[idx] = orig - FD_EPS;
    let down = loss(tensor)?;
    tensor.data_mut()[idx] = orig;
    Ok((up - down) / (2.0 * FD_EPS))
}

/// Checks `analytic` against finite differences at `coords` coordinates of
/// `tensor`, chosen deterministically.
fn check_tensor(
    name: &str,
    tensor: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: usize,
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<CheckOutcome> {
    analytic.expect_shape(tensor.shape(), "analytic gradient")?;
    let n = tensor.numel();
    let picks: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        (0..coords).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut max_rel = 0.0f64;
    for idx in picks.iter().copied() {
        let numeric = central_diff(tensor, idx, &mut loss)?;
        max_rel = max_rel.max(relative_error(analytic.data()[idx], numeric));
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        coords: picks.len(),
        max_rel_err: max_rel,
        tolerance: LAYER_TOL,
    })
}

fn conv_checks(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 1, 0]);
    let spec = ConvSpec {
        in_channels: 3,
        out_channels: 4,
        kernel: (3, 3, 3),
        stride: (1, 2, 2),
        padding: (1, 1, 1),
    };
    let mut input = uniform(&[2, 3, 5, 6, 6], -1.0, 1.0, &mut rng);
    let mut weight = uniform(&spec.weight_shape(), -0.5, 0.5, &mut rng);
    let mut bias = uniform(&[4], -0.5, 0.5, &mut rng);
    let out_shape = crate::ops::conv3d_output_shape(input.shape(), &spec)?;
    let proj = uniform(&out_shape, -1.0, 1.0, &mut rng);

    let grads = {
        let y = conv3d_forward(&input, &weight, Some(&bias), &spec)?;
        let _ = y;
        conv3d_backward(&input, &weight, true, &spec, &proj)?
    };
    let w_snapshot = weight.clone();
    let b_snapshot = bias.clone();
    let i_snapshot = input.clone();
    out.push(check_tensor(
        "conv3d.weight",
        &mut weight,
        &grads.weight,
        60,
        &mut rng,
        |w| Ok(dot(&conv3d_forward(&i_snapshot, w, Some(&b_snapshot), &spec)?, &proj)),
    )?);
    out.push(check_tensor(
        "conv3d.input",
        &mut input,
        &grads.input,
        60,
        &mut rng,
        |x| Ok(dot(&conv3d_forward(x, &w_snapshot, Some(&b_snapshot), &spec)?, &proj)),
    )?);
    let bias_grad = grads.bias.expect("forward had a bias");
    out.push(check_tensor(
        "conv3d.bias",
        &mut bias,
        &bias_grad,
        4,
        &mut rng,
        |b| Ok(dot(&conv3d_forward(&i_snapshot, &w_snapshot, Some(b), &spec)?, &proj)),
    )?);
    Ok(())
}

fn batchnorm_checks(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 2, 0]);
    let c = 4;
    let mut input = uniform(&[3, c, 2, 3, 3], -1.0, 1.0, &mut rng);
    let mut gamma = uniform_off_zero(&[c], &mut rng);
    let mut beta = uniform(&[c], -0.5, 0.5, &mut rng);
    let proj = uniform(input.shape(), -1.0, 1.0, &mut rng);

    // Forward must stay pure across FD evaluations, so every call gets a
    // fresh running-stats clone.
    let fwd = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let mut state = BnState::new(c);
        let (y, _) = batchnorm3d_forward(x, g, b, &mut state, Phase::Train, 1e-5, 0.1)?;
        Ok(dot(&y, &proj))
    };
    let grads = {
        let mut state = BnState::new(c);
        let (_, cache) = batchnorm3d_forward(&input, &gamma, &beta, &mut state, Phase::Train, 1e-5, 0.1)?;
        batchnorm3d_backward(&input, &gamma, &cache, 1e-5, &proj)?
    };
    let (xs, gs, bs) = (input.clone(), gamma.clone(), beta.clone());
    out.push(check_tensor(
        "batchnorm3d.input",
        &mut input,
        &grads.input,
        60,
        &mut rng,
        |x| fwd(x, &gs, &bs),
    )?);
    out.push(check_tensor(
        "batchnorm3d.gamma",
        &mut gamma,
        &grads.gamma,
        c,
        &mut rng,
        |g| fwd(&xs, g, &bs),
    )?);
    out.push(check_tensor(
        "batchnorm3d.beta",
        &mut beta,
        &grads.beta,
        c,
        &mut rng,
        |b| fwd(&xs, &gs, b),
    )?);
    Ok(())
}

fn relu_check(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 3, 0]);
    let mut input = uniform_off_zero(&[2, 3, 2, 4, 4], &mut rng);
    let proj = uniform(input.shape(), -1.0, 1.0, &mut rng);
    let analytic = relu_backward(&input, &proj)?;
    out.push(check_tensor(
        "relu",
        &mut input,
        &analytic,
        60,
        &mut rng,
        |x| Ok(dot(&relu_forward(x), &proj)),
    )?);
    Ok(())
}

fn maxpool_check(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 4, 0]);
    let window = (2, 3, 3);
    let stride = (1, 2, 2);
    let mut input = uniform(&[2, 2, 4, 6, 6], -1.0, 1.0, &mut rng);
    let (pooled, argmax) = maxpool3d_forward(&input, window, stride)?;
    let proj = uniform(pooled.shape(), -1.0, 1.0, &mut rng);
    let analytic = maxpool3d_backward(input.shape(), &argmax, &proj)?;
    out.push(check_tensor(
        "maxpool3d",
        &mut input,
        &analytic,
        60,
        &mut rng,
        |x| {
            let (y, _) = maxpool3d_forward(x, window, stride)?;
            Ok(dot(&y, &proj))
        },
    )?);
    Ok(())
}

fn avgpool_check(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 5, 0]);
    let mut input = uniform(&[2, 3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let proj = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let analytic = global_avgpool_backward(input.shape(), &proj)?;
    out.push(check_tensor(
        "global_avgpool",
        &mut input,
        &analytic,
        40,
        &mut rng,
        |x| Ok(dot(&global_avgpool_forward(x)?, &proj)),
    )?);
    Ok(())
}

fn linear_checks(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 6, 0]);
    let mut input = uniform(&[4, 7], -1.0, 1.0, &mut rng);
    let mut weight = uniform(&[7, 5], -0.5, 0.5, &mut rng);
    let mut bias = uniform(&[5], -0.5, 0.5, &mut rng);
    let proj = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let grads = linear_backward(&input, &weight, &proj)?;
    let (xs, ws) = (input.clone(), weight.clone());
    let bs = bias.clone();
    out.push(check_tensor(
        "linear.weight",
        &mut weight,
        &grads.weight,
        35,
        &mut rng,
        |w| Ok(dot(&linear_forward(&xs, w, &bs)?, &proj)),
    )?);
    out.push(check_tensor(
        "linear.bias",
        &mut bias,
        &grads.bias,
        5,
        &mut rng,
        |b| Ok(dot(&linear_forward(&xs, &ws, b)?, &proj)),
    )?);
    out.push(check_tensor(
        "linear.input",
        &mut input,
        &grads.input,
        28,
        &mut rng,
        |x| Ok(dot(&linear_forward(x, &ws, &bs)?, &proj)),
    )?);
    Ok(())
}

fn loss_check(seed: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = stream([seed, domain::TEST, 7, 0]);
    let mut logits = uniform(&[5, 9], -2.0, 2.0, &mut rng);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..9)).collect();
    let (_, analytic) = softmax_cross_entropy(&logits, &labels)?;
    out.push(check_tensor(
        "softmax_cross_entropy",
        &mut logits,
        &analytic,
        45,
        &mut rng,
        |l| Ok(softmax_cross_entropy(l, &labels)?.0),
    )?);
    Ok(())
}

/// Finite-difference checks for every layer type at one seed.
pub fn run_layer_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    conv_checks(seed, &mut out)?;
    batchnorm_checks(seed, &mut out)?;
    relu_check(seed, &mut out)?;
    maxpool_check(seed, &mut out)?;
    avgpool_check(seed, &mut out)?;
    linear_checks(seed, &mut out)?;
    loss_check(seed, &mut out)?;
    Ok(out)
}

/// Draws coordinates across the whole parameter set, weighted by element
/// count.
fn sample_coordinates(
    params: &NetworkParams<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, usize)> {
    let total = params.total_elements();
    (0..count)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            for name in params.names() {
                let n = params.get(name).expect("listed name").numel();
                if flat < n {
                    return (name.clone(), flat);
                }
                flat -= n;
            }
            unreachable!("flat index within total_elements")
        })
        .collect()
}

/// Whole-network check: puzzle loss on the tiny backbone, finite
/// differences at `min_coords` parameters sampled across every tensor.
pub fn run_whole_net_check(seed: u64, min_coords: usize) -> Result<CheckOutcome> {
    let cfg = BackboneConfig::tiny();
    let mut rng = stream([seed, domain::TEST, 8, 0]);
    let (mut params, buffers) = build_backbone::<f64>(&cfg, &mut rng)?;
    add_puzzle_head(&mut params, &cfg, (4, 20, 20), 48, &mut rng)?;
    let crops = uniform(&[8, 3, 4, 20, 20], -0.5, 0.5, &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..48)).collect();

    // Train phase exercises the batch-statistics path; a fresh buffer clone
    // per evaluation keeps the loss pure.
    let loss_of = |p: &NetworkParams<f64>, buf: &BnBuffers<f64>| -> Result<f64> {
        let mut b = buf.clone();
        let (loss, _, _) = puzzle_loss_and_grads(&cfg, p, &mut b, &crops, &labels, Phase::Train, false)?;
        Ok(loss)
    };
    let grads = {
        let mut b = buffers.clone();
        let (_, _, g) = puzzle_loss_and_grads(&cfg, &params, &mut b, &crops, &labels, Phase::Train, true)?;
        g.expect("grads requested")
    };

    let coords = sample_coordinates(&params, min_coords, &mut rng);
    let mut max_rel = 0.0f64;
    for (name, idx) in &coords {
        let orig = params.get(name)?.data()[*idx];
        params.get_mut(name)?.data_mut()[*idx] = orig + FD_EPS;
        let up = loss_of(&params, &buffers)?;
        params.get_mut(name)?.data_mut()[*idx] = orig - FD_EPS;
        let down = loss_of(&params, &buffers)?;
        params.get_mut(name)?.data_mut()[*idx] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::state(format!("no gradient for '{name}'")))?
            .data()[*idx];
        max_rel = max_rel.max(relative_error(analytic, numeric));
    }
    Ok(CheckOutcome {
        name: format!("whole_net[seed={seed}]"),
        coords: coords.len(),
        max_rel_err: max_rel,
        tolerance: NET_TOL,
    })
}

/// Layer checks plus the whole-network check over every seed.
pub fn run_full(seeds: &[u64], net_coords: usize) -> Result<GradCheckSummary> {
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let mut layer = run_layer_checks(seed)?;
        for o in &mut layer {
            o.name = format!("{}[seed={seed}]", o.name);
        }
        outcomes.extend(layer);
        outcomes.push(run_whole_net_check(seed, net_coords)?);
    }
    Ok(GradCheckSummary { outcomes })
}
