//! 3D residual backbone, the four-tower puzzle head, and the action head.
//!
//! One tower maps a crop `[N, 3, t, h, w]` through conv, batch norm, relu,
//! an optional stem pool, and a chain of basic residual blocks. The action
//! head consumes the globally average-pooled trunk (`[N, D]`); the puzzle
//! head instead consumes the flattened trunk volume per crop, because
//! telling neighboring crops apart needs the within-crop layout that
//! pooling erases. The head concatenates the four feature rows in
//! emitted-tuple order and applies two fully-connected layers. Weight
//! sharing across towers is structural: the four crop groups are stacked
//! into one batch and run through a single parameter set, so batch norm
//! statistics cover the whole 4N-crop batch.
//!
//! Every forward returns a trace holding the per-layer tensors the matching
//! backward needs; parameter gradients accumulate into [`Grads`] under the
//! owning parameter's name.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm3d_backward, batchnorm3d_forward, conv3d_backward, conv3d_forward,
    conv3d_output_shape, global_avgpool_backward, global_avgpool_forward, linear_backward,
    linear_forward, maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward, BnCache,
    BnState, ConvSpec, Phase,
};
use crate::params::{Grads, NetworkParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Resnet10,
    Resnet18,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Resnet10 => "resnet10",
            Variant::Resnet18 => "resnet18",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Variant::Tiny),
            "resnet10" => Ok(Variant::Resnet10),
            "resnet18" => Ok(Variant::Resnet18),
            other => Err(Error::config(format!("unknown backbone variant '{other}'"))),
        }
    }
}

/// Backbone layout. The stem is one convolution (plus an optional max pool);
/// stage `i` holds `block_counts[i]` basic residual blocks at
/// `stage_channels[i]` channels, entered with stride 2 for every stage after
/// the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub block_counts: Vec<usize>,
    pub conv1_channels: usize,
    pub conv1_kernel: (usize, usize, usize),
    pub conv1_stride: (usize, usize, usize),
    pub conv1_padding: (usize, usize, usize),
    pub stem_pool: bool,
    /// Hidden width of the puzzle head's first fully-connected layer.
    pub head_width: usize,
}

impl BackboneConfig {
    /// Test-scale backbone: 3x3x3 stem without pooling and two single-block
    /// stages, small enough for finite-difference checks.
    pub fn tiny() -> Self {
        BackboneConfig {
            variant: Variant::Tiny,
            in_channels: 3,
            stage_channels: vec![8, 16],
            block_counts: vec![1, 1],
            conv1_channels: 8,
            conv1_kernel: (3, 3, 3),
            conv1_stride: (1, 2, 2),
            conv1_padding: (1, 1, 1),
            stem_pool: false,
            head_width: 256,
        }
    }

    fn resnet(variant: Variant, block_counts: Vec<usize>) -> Self {
        BackboneConfig {
            variant,
            in_channels: 3,
            stage_channels: vec![64, 128, 256, 512],
            block_counts,
            conv1_channels: 64,
            conv1_kernel: (7, 7, 7),
            conv1_stride: (1, 2, 2),
            conv1_padding: (3, 3, 3),
            stem_pool: true,
            head_width: 512,
        }
    }

    pub fn resnet10() -> Self {
        Self::resnet(Variant::Resnet10, vec![1, 1, 1, 1])
    }

    pub fn resnet18() -> Self {
        Self::resnet(Variant::Resnet18, vec![2, 2, 2, 2])
    }

    pub fn from_variant(variant: Variant) -> Self {
        match variant {
            Variant::Tiny => Self::tiny(),
            Variant::Resnet10 => Self::resnet10(),
            Variant::Resnet18 => Self::resnet18(),
        }
    }

    /// Tower output dimension D (last stage channel count).
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.block_counts.len() {
            return Err(Error::config(
                "stage_channels and block_counts must be non-empty and equal length",
            ));
        }
        if self.block_counts.iter().any(|&b| b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.in_channels == 0 || self.conv1_channels == 0 || self.head_width == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }

    fn conv1_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.conv1_channels,
            kernel: self.conv1_kernel,
            stride: self.conv1_stride,
            padding: self.conv1_padding,
        }
    }

    /// `(stage, block, in_channels, out_channels, stride)` in forward order.
    fn block_plan(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut in_ch = self.conv1_channels;
        for (si, (&ch, &blocks)) in self
            .stage_channels
            .iter()
            .zip(self.block_counts.iter())
            .enumerate()
        {
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                plan.push((si, bi, in_ch, ch, stride));
                in_ch = ch;
            }
        }
        plan
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

fn block_specs(in_ch: usize, out_ch: usize, stride: usize) -> (ConvSpec, ConvSpec, ConvSpec) {
    let conv_a = ConvSpec {
        in_channels: in_ch,
        out_channels: out_ch,
        kernel: (3, 3, 3),
        stride: (stride, stride, stride),
        padding: (1, 1, 1),
    };
    let conv_b = ConvSpec {
        in_channels: out_ch,
        out_channels: out_ch,
        kernel: (3, 3, 3),
        stride: (1, 1, 1),
        padding: (1, 1, 1),
    };
    let proj = ConvSpec {
        in_channels: in_ch,
        out_channels: out_ch,
        kernel: (1, 1, 1),
        stride: (stride, stride, stride),
        padding: (0, 0, 0),
    };
    (conv_a, conv_b, proj)
}

fn needs_projection(in_ch: usize, out_ch: usize, stride: usize) -> bool {
    in_ch != out_ch || stride != 1
}

/// Running batch-norm statistics for every normalization layer, keyed by the
/// layer's parameter prefix (sorted iteration order).
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers<S: Scalar> {
    map: BTreeMap<String, BnState<S>>,
}

impl<S: Scalar> BnBuffers<S> {
    pub fn new() -> Self {
        BnBuffers {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, state: BnState<S>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::state(format!("duplicate batch-norm buffer '{name}'")));
        }
        self.map.insert(name.to_string(), state);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&BnState<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::state(format!("missing batch-norm buffer '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut BnState<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::state(format!("missing batch-norm buffer '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnState<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnState<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<T: Scalar>(&self) -> BnBuffers<T> {
        BnBuffers {
            map: self
                .map
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        BnState {
                            running_mean: v.running_mean.cast(),
                            running_var: v.running_var.cast(),
                            batches: v.batches,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<S: Scalar> Default for BnBuffers<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn he_tensor<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_acc(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

fn insert_conv<S: Scalar>(
    params: &mut NetworkParams<S>,
    name: &str,
    spec: &ConvSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let shape = spec.weight_shape();
    let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1 * spec.kernel.2;
    params.insert(name, he_tensor(&shape, fan_in, rng), false)
}

fn insert_bn<S: Scalar>(
    params: &mut NetworkParams<S>,
    buffers: &mut BnBuffers<S>,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    params.insert(
        &format!("{prefix}.gamma"),
        Tensor::filled(&[channels], S::one()),
        true,
    )?;
    params.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?;
    buffers.insert(prefix, BnState::new(channels))
}

fn insert_linear<S: Scalar>(
    params: &mut NetworkParams<S>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert(
        &format!("{prefix}.weight"),
        he_tensor(&[d_in, d_out], d_in, rng),
        false,
    )?;
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d_out]), true)
}

/// Creates backbone weights and batch-norm state. Convolutions carry no
/// bias (each is followed by batch norm); weights draw from a fan-in scaled
/// normal in insertion order, so one seed fixes every tensor.
pub fn build_backbone<S: Scalar>(
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(NetworkParams<S>, BnBuffers<S>)> {
    cfg.validate()?;
    let mut params = NetworkParams::new();
    let mut buffers = BnBuffers::new();
    insert_conv(&mut params, "conv1.weight", &cfg.conv1_spec(), rng)?;
    insert_bn(&mut params, &mut buffers, "bn1", cfg.conv1_channels)?;
    for (si, bi, in_ch, out_ch, stride) in cfg.block_plan() {
        let p = block_prefix(si, bi);
        let (conv_a, _, proj) = block_specs(in_ch, out_ch, stride);
        insert_conv(&mut params, &format!("{p}.conv_a.weight"), &conv_a, rng)?;
        insert_bn(&mut params, &mut buffers, &format!("{p}.bn_a"), out_ch)?;
        let conv_b = block_specs(in_ch, out_ch, stride).1;
        insert_conv(&mut params, &format!("{p}.conv_b.weight"), &conv_b, rng)?;
        insert_bn(&mut params, &mut buffers, &format!("{p}.bn_b"), out_ch)?;
        if needs_projection(in_ch, out_ch, stride) {
            insert_conv(&mut params, &format!("{p}.proj.weight"), &proj, rng)?;
            insert_bn(&mut params, &mut buffers, &format!("{p}.proj_bn"), out_ch)?;
        }
    }
    Ok((params, buffers))
}

/// Width of one tower's flattened trunk activation for a crop shaped
/// `[3, t, h, w]`; this is what the puzzle head consumes per crop.
pub fn puzzle_feature_dim(cfg: &BackboneConfig, crop: (usize, usize, usize)) -> Result<usize> {
    let s = forward_shape(cfg, &[1, cfg.in_channels, crop.0, crop.1, crop.2])?;
    Ok(s[1] * s[2] * s[3] * s[4])
}

/// Adds the two puzzle-head layers for crops shaped `[3, t, h, w]`:
/// FC(4 * flattened trunk -> head_width), relu, FC(head_width -> classes).
pub fn add_puzzle_head<S: Scalar>(
    params: &mut NetworkParams<S>,
    cfg: &BackboneConfig,
    crop: (usize, usize, usize),
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = puzzle_feature_dim(cfg, crop)?;
    insert_linear(params, "head.tower", d, cfg.head_width, rng)?;
    insert_linear(params, "head.fc1", 4 * cfg.head_width, cfg.head_width, rng)?;
    insert_linear(params, "head.fc2", cfg.head_width, num_classes, rng)?;
    // Shrunk classifier weights keep the untrained net near uniform over
    // classes without zeroing gradients through the rest of the net.
    let scale = S::from(0.05).expect("scalar from f64");
    let w = params.get_mut("head.fc2.weight").expect("just inserted");
    for v in w.data_mut() {
        *v = *v * scale;
    }
    Ok(())
}

/// Adds the single action-classification layer FC(D -> num_classes).
pub fn add_action_head<S: Scalar>(
    params: &mut NetworkParams<S>,
    cfg: &BackboneConfig,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    insert_linear(params, "action.fc", cfg.feature_dim(), num_classes, rng)
}

/// True for parameters that belong to a classification head rather than the
/// shared backbone.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("action.")
}

/// Copies every non-head tensor and batch-norm state from a source network
/// into a target, leaving the target's heads untouched. Errors before
/// writing anything if a non-head source tensor is missing from the target
/// or disagrees in shape, listing the offending names.
pub fn copy_backbone<S: Scalar>(
    src_params: &NetworkParams<S>,
    src_buffers: &BnBuffers<S>,
    dst_params: &mut NetworkParams<S>,
    dst_buffers: &mut BnBuffers<S>,
) -> Result<Vec<String>> {
    let mut mismatched = Vec::new();
    for name in src_params.names() {
        if is_head_param(name) {
            continue;
        }
        match dst_params.get(name) {
            Ok(t) if t.shape() == src_params.get(name)?.shape() => {}
            Ok(_) => mismatched.push(format!("{name} (shape)")),
            Err(_) => mismatched.push(format!("{name} (missing)")),
        }
    }
    for (name, state) in src_buffers.iter() {
        match dst_buffers.get(name) {
            Ok(t) if t.running_mean.shape() == state.running_mean.shape() => {}
            Ok(_) => mismatched.push(format!("{name} (shape)")),
            Err(_) => mismatched.push(format!("{name} (missing)")),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::state(format!(
            "backbone does not fit the target network: {}",
            mismatched.join(", ")
        )));
    }
    let mut copied = Vec::new();
    for name in src_params.names() {
        if is_head_param(name) {
            continue;
        }
        *dst_params.get_mut(name)? = src_params.get(name)?.clone();
        copied.push(name.clone());
    }
    for (name, state) in src_buffers.iter() {
        *dst_buffers.get_mut(name)? = state.clone();
    }
    Ok(copied)
}

/// Smallest `(t, h, w)` input extents the stage plan accepts, found by
/// probing each axis independently (the shape formulas are monotone and
/// separable per axis).
pub fn min_input_extents(cfg: &BackboneConfig) -> (usize, usize, usize) {
    let probe = |t: usize, h: usize, w: usize| forward_shape(cfg, &[1, cfg.in_channels, t, h, w]).is_ok();
    let scan = |axis: usize| {
        (1..=64)
            .find(|&v| {
                let mut e = [64, 64, 64];
                e[axis] = v;
                probe(e[0], e[1], e[2])
            })
            .expect("64 is enough for every supported stage plan")
    };
    (scan(0), scan(1), scan(2))
}

/// Output shape of the convolutional trunk for a given input shape.
pub fn forward_shape(cfg: &BackboneConfig, input_shape: &[usize]) -> Result<Vec<usize>> {
    let mut shape = conv3d_output_shape(input_shape, &cfg.conv1_spec())?;
    if cfg.stem_pool {
        for (axis, (k, s)) in [(2usize, (3usize, 2usize)), (3, (3, 2)), (4, (3, 2))] {
            if shape[axis] < k {
                return Err(Error::shape(format!(
                    "stem pool: window {k} exceeds extent {} on axis {axis}",
                    shape[axis]
                )));
            }
            shape[axis] = (shape[axis] - k) / s + 1;
        }
    }
    for (_, _, in_ch, out_ch, stride) in cfg.block_plan() {
        let (conv_a, conv_b, _) = block_specs(in_ch, out_ch, stride);
        shape = conv3d_output_shape(&shape, &conv_a)?;
        shape = conv3d_output_shape(&shape, &conv_b)?;
    }
    Ok(shape)
}

fn check_tower_input<S: Scalar>(cfg: &BackboneConfig, input: &Tensor<S>) -> Result<()> {
    input.expect_rank(5, "tower input")?;
    if input.dim(1) != cfg.in_channels {
        return Err(Error::shape(format!(
            "tower input has {} channels, config wants {}",
            input.dim(1),
            cfg.in_channels
        )));
    }
    if forward_shape(cfg, input.shape()).is_err() {
        let (mt, mh, mw) = min_input_extents(cfg);
        return Err(Error::shape(format!(
            "tower input {}x{}x{} is below the minimum {mt}x{mh}x{mw} for variant {}",
            input.dim(2),
            input.dim(3),
            input.dim(4),
            cfg.variant.name()
        )));
    }
    Ok(())
}

/// Per-layer tensors one residual block's backward pass needs.
#[derive(Debug, Clone)]
pub struct BlockTrace<S: Scalar> {
    stage: usize,
    block: usize,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    /// Block input (feeds conv_a and the shortcut).
    input: Tensor<S>,
    conv_a_out: Tensor<S>,
    bn_a_cache: BnCache,
    /// bn_a output, pre-relu.
    bn_a_out: Tensor<S>,
    relu_a_out: Tensor<S>,
    conv_b_out: Tensor<S>,
    bn_b_cache: BnCache,
    /// Projection shortcut tensors when present: conv output and bn cache.
    proj: Option<(Tensor<S>, BnCache)>,
    /// Residual sum, pre-relu.
    sum: Tensor<S>,
}

/// Everything the tower backward pass needs, captured by [`tower_forward`].
#[derive(Debug, Clone)]
pub struct TowerTrace<S: Scalar> {
    input: Tensor<S>,
    conv1_out: Tensor<S>,
    bn1_cache: BnCache,
    /// bn1 output, pre-relu.
    bn1_out: Tensor<S>,
    /// Pre-pool activation shape and pool argmax when the stem pools.
    stem_pool: Option<(Vec<usize>, Vec<u32>)>,
    blocks: Vec<BlockTrace<S>>,
    /// Final block activation feeding the global pool.
    trunk_out: Tensor<S>,
}

fn add_into<S: Scalar>(acc: &mut Tensor<S>, other: &Tensor<S>) -> Result<()> {
    other.expect_shape(acc.shape(), "residual add")?;
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

/// Runs one tower over a crop batch `[N, C, t, h, w]`, returning `[N, D]`
/// features and the backward trace. Train phase folds batch statistics into
/// `buffers`; eval phase requires every batch-norm layer to have seen at
/// least one training batch.
pub fn tower_forward<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    buffers: &mut BnBuffers<S>,
    input: &Tensor<S>,
    phase: Phase,
) -> Result<(Tensor<S>, TowerTrace<S>)> {
    check_tower_input(cfg, input)?;
    let conv1_out = conv3d_forward(input, params.get("conv1.weight")?, None, &cfg.conv1_spec())?;
    let (bn1_out, bn1_cache) = batchnorm3d_forward(
        &conv1_out,
        params.get("bn1.gamma")?,
        params.get("bn1.beta")?,
        buffers.get_mut("bn1")?,
        phase,
        BN_EPS,
        BN_MOMENTUM,
    )?;
    let stem_act = relu_forward(&bn1_out);
    let (stem_out, stem_pool) = if cfg.stem_pool {
        let (pooled, argmax) = maxpool3d_forward(&stem_act, (3, 3, 3), (2, 2, 2))?;
        (pooled, Some((stem_act.shape().to_vec(), argmax)))
    } else {
        (stem_act, None)
    };

    let mut blocks = Vec::new();
    let mut x = stem_out;
    for (si, bi, in_ch, out_ch, stride) in cfg.block_plan() {
        let p = block_prefix(si, bi);
        let (spec_a, spec_b, spec_p) = block_specs(in_ch, out_ch, stride);
        let block_in = x;
        let conv_a_out = conv3d_forward(
            &block_in,
            params.get(&format!("{p}.conv_a.weight"))?,
            None,
            &spec_a,
        )?;
        let (bn_a_out, bn_a_cache) = batchnorm3d_forward(
            &conv_a_out,
            params.get(&format!("{p}.bn_a.gamma"))?,
            params.get(&format!("{p}.bn_a.beta"))?,
            buffers.get_mut(&format!("{p}.bn_a"))?,
            phase,
            BN_EPS,
            BN_MOMENTUM,
        )?;
        let relu_a_out = relu_forward(&bn_a_out);
        let conv_b_out = conv3d_forward(
            &relu_a_out,
            params.get(&format!("{p}.conv_b.weight"))?,
            None,
            &spec_b,
        )?;
        let (bn_b_out, bn_b_cache) = batchnorm3d_forward(
            &conv_b_out,
            params.get(&format!("{p}.bn_b.gamma"))?,
            params.get(&format!("{p}.bn_b.beta"))?,
            buffers.get_mut(&format!("{p}.bn_b"))?,
            phase,
            BN_EPS,
            BN_MOMENTUM,
        )?;
        let mut sum = bn_b_out;
        let proj = if needs_projection(in_ch, out_ch, stride) {
            let proj_out = conv3d_forward(
                &block_in,
                params.get(&format!("{p}.proj.weight"))?,
                None,
                &spec_p,
            )?;
            let (proj_bn_out, proj_cache) = batchnorm3d_forward(
                &proj_out,
                params.get(&format!("{p}.proj_bn.gamma"))?,
                params.get(&format!("{p}.proj_bn.beta"))?,
                buffers.get_mut(&format!("{p}.proj_bn"))?,
                phase,
                BN_EPS,
                BN_MOMENTUM,
            )?;
            add_into(&mut sum, &proj_bn_out)?;
            Some((proj_out, proj_cache))
        } else {
            add_into(&mut sum, &block_in)?;
            None
        };
        x = relu_forward(&sum);
        blocks.push(BlockTrace {
            stage: si,
            block: bi,
            in_ch,
            out_ch,
            stride,
            input: block_in,
            conv_a_out,
            bn_a_cache,
            bn_a_out,
            relu_a_out,
            conv_b_out,
            bn_b_cache,
            proj,
            sum,
        });
    }
    let features = global_avgpool_forward(&x)?;
    let trace = TowerTrace {
        input: input.clone(),
        conv1_out,
        bn1_cache,
        bn1_out,
        stem_pool,
        blocks,
        trunk_out: x,
    };
    Ok((features, trace))
}

fn backward_bn<S: Scalar>(
    params: &NetworkParams<S>,
    grads: &mut Grads<S>,
    prefix: &str,
    input: &Tensor<S>,
    cache: &BnCache,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g = batchnorm3d_backward(input, params.get(&format!("{prefix}.gamma"))?, cache, BN_EPS, d_out)?;
    grads.accumulate(&format!("{prefix}.gamma"), g.gamma)?;
    grads.accumulate(&format!("{prefix}.beta"), g.beta)?;
    Ok(g.input)
}

fn backward_conv<S: Scalar>(
    params: &NetworkParams<S>,
    grads: &mut Grads<S>,
    name: &str,
    input: &Tensor<S>,
    spec: &ConvSpec,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g = conv3d_backward(input, params.get(name)?, false, spec, d_out)?;
    grads.accumulate(name, g.weight)?;
    Ok(g.input)
}

/// Backpropagates pooled-feature gradients `[N, D]` through the trace,
/// accumulating parameter gradients. Returns the gradient at the tower
/// input.
pub fn tower_backward<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    trace: &TowerTrace<S>,
    d_features: &Tensor<S>,
    grads: &mut Grads<S>,
) -> Result<Tensor<S>> {
    let d = global_avgpool_backward(trace.trunk_out.shape(), d_features)?;
    backward_through_trunk(cfg, params, trace, d, grads)
}

/// Flattens the trace's final conv activation `[N, C, T, H, W]` into
/// `[N, C*T*H*W]` rows for the puzzle head.
pub fn flatten_trunk<S: Scalar>(trace: &TowerTrace<S>) -> Tensor<S> {
    let t = &trace.trunk_out;
    let n = t.dim(0);
    Tensor::new(&[n, t.numel() / n], t.data().to_vec()).expect("same element count")
}

/// Backpropagates a gradient given at the flattened trunk rows (the
/// [`flatten_trunk`] output). Returns the gradient at the tower input.
pub fn tower_backward_from_trunk<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    trace: &TowerTrace<S>,
    d_flat: &Tensor<S>,
    grads: &mut Grads<S>,
) -> Result<Tensor<S>> {
    let n = trace.trunk_out.dim(0);
    d_flat.expect_shape(&[n, trace.trunk_out.numel() / n], "flattened trunk gradient")?;
    let d = Tensor::new(trace.trunk_out.shape(), d_flat.data().to_vec())?;
    backward_through_trunk(cfg, params, trace, d, grads)
}

fn backward_through_trunk<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    trace: &TowerTrace<S>,
    mut d: Tensor<S>,
    grads: &mut Grads<S>,
) -> Result<Tensor<S>> {
    for bt in trace.blocks.iter().rev() {
        let p = block_prefix(bt.stage, bt.block);
        let (spec_a, spec_b, spec_p) = block_specs(bt.in_ch, bt.out_ch, bt.stride);
        // d is the gradient at relu(sum); the add node passes d_sum to both
        // the main path and the shortcut.
        let d_sum = relu_backward(&bt.sum, &d)?;
        let d_conv_b = backward_bn(params, grads, &format!("{p}.bn_b"), &bt.conv_b_out, &bt.bn_b_cache, &d_sum)?;
        let d_relu_a = backward_conv(params, grads, &format!("{p}.conv_b.weight"), &bt.relu_a_out, &spec_b, &d_conv_b)?;
        let d_bn_a = relu_backward(&bt.bn_a_out, &d_relu_a)?;
        let d_conv_a = backward_bn(params, grads, &format!("{p}.bn_a"), &bt.conv_a_out, &bt.bn_a_cache, &d_bn_a)?;
        let mut d_in = backward_conv(params, grads, &format!("{p}.conv_a.weight"), &bt.input, &spec_a, &d_conv_a)?;
        match &bt.proj {
            Some((proj_out, proj_cache)) => {
                let d_proj = backward_bn(params, grads, &format!("{p}.proj_bn"), proj_out, proj_cache, &d_sum)?;
                let d_sc = backward_conv(params, grads, &format!("{p}.proj.weight"), &bt.input, &spec_p, &d_proj)?;
                add_into(&mut d_in, &d_sc)?;
            }
            None => add_into(&mut d_in, &d_sum)?,
        }
        d = d_in;
    }
    let d_stem_act = match &trace.stem_pool {
        Some((shape, argmax)) => maxpool3d_backward(shape, argmax, &d)?,
        None => d,
    };
    let d_bn1 = relu_backward(&trace.bn1_out, &d_stem_act)?;
    let d_conv1 = backward_bn(params, grads, "bn1", &trace.conv1_out, &trace.bn1_cache, &d_bn1)?;
    backward_conv(params, grads, "conv1.weight", &trace.input, &cfg.conv1_spec(), &d_conv1)
}

/// Splits a position-major `[4N, D]` feature batch into four `[N, D]`
/// tensors; row `p*N + n` of the input is row `n` of output `p`.
pub fn split_features<S: Scalar>(features: &Tensor<S>) -> Result<[Tensor<S>; 4]> {
    features.expect_rank(2, "stacked features")?;
    let rows = features.dim(0);
    if rows % 4 != 0 {
        return Err(Error::shape(format!(
            "stacked features need 4|rows, got {rows}"
        )));
    }
    let (n, d) = (rows / 4, features.dim(1));
    let src = features.data();
    let mut out = Vec::with_capacity(4);
    for p in 0..4 {
        let slice = &src[p * n * d..(p + 1) * n * d];
        out.push(Tensor::new(&[n, d], slice.to_vec())?);
    }
    Ok(<[Tensor<S>; 4]>::try_from(out).expect("exactly four"))
}

/// Inverse of [`split_features`].
pub fn stack_features<S: Scalar>(parts: &[Tensor<S>; 4]) -> Result<Tensor<S>> {
    let (n, d) = (parts[0].dim(0), parts[0].dim(1));
    let mut data = Vec::with_capacity(4 * n * d);
    for p in parts {
        p.expect_shape(&[n, d], "feature group")?;
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[4 * n, d], data)
}

/// Tensors captured by [`puzzle_head_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct PuzzleHeadTrace<S: Scalar> {
    /// Raw per-position inputs `[N, D]`.
    tower_in: [Tensor<S>; 4],
    /// Shared embedding layer output per position, pre-relu `[N, E]`.
    tower_pre: [Tensor<S>; 4],
    /// Concatenated embeddings `[N, 4E]`.
    concat: Tensor<S>,
    /// First joint layer output, pre-relu.
    fc1_out: Tensor<S>,
    relu_out: Tensor<S>,
}

/// Embeds each of the four `[N, D]` feature tensors with one shared linear
/// layer, concatenates the embeddings in emitted-tuple order, and applies
/// the two joint layers FC, relu, FC. Positions stay separate until the
/// concatenation, so only the joint layers can compare crops.
pub fn puzzle_head_forward<S: Scalar>(
    params: &NetworkParams<S>,
    features: &[Tensor<S>; 4],
) -> Result<(Tensor<S>, PuzzleHeadTrace<S>)> {
    let (n, d) = (features[0].dim(0), features[0].dim(1));
    for f in features {
        f.expect_shape(&[n, d], "puzzle head feature")?;
    }
    let wt = params.get("head.tower.weight")?;
    let bt = params.get("head.tower.bias")?;
    let e = wt.dim(1);
    let mut tower_pre = Vec::with_capacity(4);
    let mut concat = Tensor::zeros(&[n, 4 * e]);
    {
        let dst = concat.data_mut();
        for (p, f) in features.iter().enumerate() {
            let pre = linear_forward(f, wt, bt)?;
            let act = relu_forward(&pre);
            let src = act.data();
            for row in 0..n {
                let o = row * 4 * e + p * e;
                dst[o..o + e].copy_from_slice(&src[row * e..(row + 1) * e]);
            }
            tower_pre.push(pre);
        }
    }
    let fc1_out = linear_forward(&concat, params.get("head.fc1.weight")?, params.get("head.fc1.bias")?)?;
    let relu_out = relu_forward(&fc1_out);
    let logits = linear_forward(&relu_out, params.get("head.fc2.weight")?, params.get("head.fc2.bias")?)?;
    Ok((
        logits,
        PuzzleHeadTrace {
            tower_in: features.clone(),
            tower_pre: <[Tensor<S>; 4]>::try_from(tower_pre).expect("exactly four"),
            concat,
            fc1_out,
            relu_out,
        },
    ))
}

/// Backward pass of the puzzle head; returns per-position feature gradients
/// in emitted-tuple order. The shared embedding layer accumulates its
/// gradient over all four positions.
pub fn puzzle_head_backward<S: Scalar>(
    params: &NetworkParams<S>,
    trace: &PuzzleHeadTrace<S>,
    d_logits: &Tensor<S>,
    grads: &mut Grads<S>,
) -> Result<[Tensor<S>; 4]> {
    let g2 = linear_backward(&trace.relu_out, params.get("head.fc2.weight")?, d_logits)?;
    grads.accumulate("head.fc2.weight", g2.weight)?;
    grads.accumulate("head.fc2.bias", g2.bias)?;
    let d_fc1 = relu_backward(&trace.fc1_out, &g2.input)?;
    let g1 = linear_backward(&trace.concat, params.get("head.fc1.weight")?, &d_fc1)?;
    grads.accumulate("head.fc1.weight", g1.weight)?;
    grads.accumulate("head.fc1.bias", g1.bias)?;
    let wt = params.get("head.tower.weight")?;
    let (n, e4) = (trace.concat.dim(0), trace.concat.dim(1));
    let e = e4 / 4;
    let src = g1.input.data();
    let mut out = Vec::with_capacity(4);
    for p in 0..4 {
        let mut d_act = Tensor::zeros(&[n, e]);
        {
            let dst = d_act.data_mut();
            for row in 0..n {
                let o = row * e4 + p * e;
                dst[row * e..(row + 1) * e].copy_from_slice(&src[o..o + e]);
            }
        }
        let d_pre = relu_backward(&trace.tower_pre[p], &d_act)?;
        let gt = linear_backward(&trace.tower_in[p], wt, &d_pre)?;
        grads.accumulate("head.tower.weight", gt.weight)?;
        grads.accumulate("head.tower.bias", gt.bias)?;
        out.push(gt.input);
    }
    Ok(<[Tensor<S>; 4]>::try_from(out).expect("exactly four"))
}

/// Full puzzle-network pass over a position-major crop batch
/// `[4N, C, t, h, w]` (crop `p` of sample `n` at row `p*N + n`) with one
/// class label per sample: shared tower, feature split, puzzle head,
/// softmax cross-entropy. Returns the mean loss, the logits, and the
/// parameter gradients when requested.
pub fn puzzle_loss_and_grads<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    buffers: &mut BnBuffers<S>,
    crops: &Tensor<S>,
    labels: &[usize],
    phase: Phase,
    want_grads: bool,
) -> Result<(f64, Tensor<S>, Option<Grads<S>>)> {
    crops.expect_rank(5, "puzzle crop batch")?;
    if crops.dim(0) != 4 * labels.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "crop batch has {} rows for {} labels; need exactly 4 per sample",
            crops.dim(0),
            labels.len()
        )));
    }
    let (_, tower_trace) = tower_forward(cfg, params, buffers, crops, phase)?;
    let features = flatten_trunk(&tower_trace);
    let groups = split_features(&features)?;
    let (logits, head_trace) = puzzle_head_forward(params, &groups)?;
    let (loss, d_logits) = crate::ops::softmax_cross_entropy(&logits, labels)?;
    if !want_grads {
        return Ok((loss, logits, None));
    }
    let mut grads = Grads::new();
    let d_groups = puzzle_head_backward(params, &head_trace, &d_logits, &mut grads)?;
    let d_features = stack_features(&d_groups)?;
    tower_backward_from_trunk(cfg, params, &tower_trace, &d_features, &mut grads)?;
    Ok((loss, logits, Some(grads)))
}

/// Trace for the single-tower action network.
#[derive(Debug, Clone)]
pub struct ActionTrace<S: Scalar> {
    tower: TowerTrace<S>,
    features: Tensor<S>,
}

/// Single tower followed by the action head: `[N, C, t, h, w]` to
/// `[N, num_classes]`.
pub fn action_forward<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    buffers: &mut BnBuffers<S>,
    input: &Tensor<S>,
    phase: Phase,
) -> Result<(Tensor<S>, ActionTrace<S>)> {
    let (features, tower) = tower_forward(cfg, params, buffers, input, phase)?;
    let logits = linear_forward(&features, params.get("action.fc.weight")?, params.get("action.fc.bias")?)?;
    Ok((logits, ActionTrace { tower, features }))
}

/// Backward pass of [`action_forward`]. When `head_only` is set the tower is
/// skipped entirely (frozen backbone), which also avoids trace-sized
/// intermediate gradients.
pub fn action_backward<S: Scalar>(
    cfg: &BackboneConfig,
    params: &NetworkParams<S>,
    trace: &ActionTrace<S>,
    d_logits: &Tensor<S>,
    head_only: bool,
    grads: &mut Grads<S>,
) -> Result<()> {
    let g = linear_backward(&trace.features, params.get("action.fc.weight")?, d_logits)?;
    grads.accumulate("action.fc.weight", g.weight)?;
    grads.accumulate("action.fc.bias", g.bias)?;
    if !head_only {
        tower_backward(cfg, params, &trace.tower, &g.input, grads)?;
    }
    Ok(())
}
