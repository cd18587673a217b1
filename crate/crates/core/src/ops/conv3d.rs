//! 3D convolution (cross-correlation) with zero padding.
//!
//! Layouts: input `[N, Cin, T, H, W]`, weight `[Cout, Cin, kT, kH, kW]`,
//! optional bias `[Cout]`, output `[N, Cout, T', H', W']` with
//! `D' = (D + 2*pad - k) / stride + 1` per axis (floor division).
//!
//! The kernels accumulate in f64. Parallel regions write disjoint output
//! slices and iterate contributions in a fixed order, so results do not
//! depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Static geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("conv3d: channel extents must be positive"));
        }
        let k = self.kernel;
        let s = self.stride;
        if k.0 == 0 || k.1 == 0 || k.2 == 0 {
            return Err(Error::shape("conv3d: kernel extents must be positive"));
        }
        if s.0 == 0 || s.1 == 0 || s.2 == 0 {
            return Err(Error::shape("conv3d: stride extents must be positive"));
        }
        Ok(())
    }
}

pub struct Conv3dGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    /// Present iff the forward pass had a bias.
    pub bias: Option<Tensor<S>>,
}

/// Output extent for one convolution axis.
fn out_extent(size: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "conv3d: kernel {k} exceeds padded {axis} extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output shape `[N, Cout, T', H', W']` for the given operands.
pub fn conv3d_output_shape(input_shape: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if input_shape.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d: input must have rank 5, got {input_shape:?}"
        )));
    }
    if input_shape[1] != spec.in_channels {
        return Err(Error::shape(format!(
            "conv3d: input channel extent {} does not match spec in_channels {}",
            input_shape[1], spec.in_channels
        )));
    }
    Ok(vec![
        input_shape[0],
        spec.out_channels,
        out_extent(input_shape[2], spec.kernel.0, spec.stride.0, spec.padding.0, "T")?,
        out_extent(input_shape[3], spec.kernel.1, spec.stride.1, spec.padding.1, "H")?,
        out_extent(input_shape[4], spec.kernel.2, spec.stride.2, spec.padding.2, "W")?,
    ])
}

fn check_operands<S: Scalar>(
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<()> {
    weight.expect_shape(&spec.weight_shape(), "conv3d weight")?;
    if let Some(b) = bias {
        b.expect_shape(&[spec.out_channels], "conv3d bias")?;
    }
    Ok(())
}

/// Range of output positions `o` with `0 <= o*stride + k_off - pad < size`,
/// clamped to `[0, out)`. Iterating only this range removes per-element
/// bounds checks from the inner loops.
#[inline]
fn valid_out_range(
    size: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
    out: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let lo_num = pad as i64 - k_off as i64;
    let lo = (lo_num + s - 1).div_euclid(s).max(0) as usize;
    let hi_num = size as i64 + pad as i64 - k_off as i64;
    let hi = if hi_num <= 0 {
        0
    } else {
        ((hi_num + s - 1).div_euclid(s) as usize).min(out)
    };
    (lo.min(hi), hi)
}

pub fn conv3d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let out_shape = conv3d_output_shape(input.shape(), spec)?;
    check_operands(weight, bias, spec)?;
    let (cin, t, h, w) = (input.dim(1), input.dim(2), input.dim(3), input.dim(4));
    let cout = spec.out_channels;
    let (kt, kh, kw) = spec.kernel;
    let (to, ho, wo) = (out_shape[2], out_shape[3], out_shape[4]);
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;

    let x = input.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&out_shape);
    let plane_o = to * ho * wo;
    let plane_i = t * h * w;

    // One (n, cout) output plane per task; each accumulates its own f64 row.
    out.data_mut()
        .par_chunks_mut(plane_o)
        .enumerate()
        .for_each(|(task, out_plane)| {
            let ni = task / cout;
            let co = task % cout;
            let mut acc = vec![0.0f64; plane_o];
            if let Some(b) = bias {
                let bv = b.data()[co].to_acc();
                acc.iter_mut().for_each(|a| *a = bv);
            }
            for ci in 0..cin {
                let xin = &x[(ni * cin + ci) * plane_i..(ni * cin + ci + 1) * plane_i];
                for ktt in 0..kt {
                    let (t0, t1) = valid_out_range(t, ktt, st, pt, to);
                    for khh in 0..kh {
                        let (h0, h1) = valid_out_range(h, khh, sh, ph, ho);
                        for kww in 0..kw {
                            let (w0, w1) = valid_out_range(w, kww, sw, pw, wo);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv =
                                wd[(((co * cin + ci) * kt + ktt) * kh + khh) * kw + kww].to_acc();
                            for tp in t0..t1 {
                                let ti = tp * st + ktt - pt;
                                for hp in h0..h1 {
                                    let hi = hp * sh + khh - ph;
                                    let ib = (ti * h + hi) * w + (w0 * sw + kww - pw);
                                    let ob = (tp * ho + hp) * wo + w0;
                                    if sw == 1 {
                                        let src = &xin[ib..ib + (w1 - w0)];
                                        let dst = &mut acc[ob..ob + (w1 - w0)];
                                        for (a, &xv) in dst.iter_mut().zip(src) {
                                            *a += wv * xv.to_acc();
                                        }
                                    } else {
                                        for wp in 0..(w1 - w0) {
                                            acc[ob + wp] += wv * xin[ib + wp * sw].to_acc();
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (o, a) in out_plane.iter_mut().zip(acc.iter()) {
                *o = S::from_acc(*a);
            }
        });
    Ok(out)
}

pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    has_bias: bool,
    spec: &ConvSpec,
    d_out: &Tensor<S>,
) -> Result<Conv3dGrads<S>> {
    let out_shape = conv3d_output_shape(input.shape(), spec)?;
    check_operands(weight, None, spec)?;
    d_out.expect_shape(&out_shape, "conv3d d_out")?;
    let (n, cin, t, h, w) = (
        input.dim(0),
        input.dim(1),
        input.dim(2),
        input.dim(3),
        input.dim(4),
    );
    let cout = spec.out_channels;
    let (kt, kh, kw) = spec.kernel;
    let (to, ho, wo) = (out_shape[2], out_shape[3], out_shape[4]);
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let plane_o = to * ho * wo;
    let plane_i = t * h * w;
    let x = input.data();
    let wd = weight.data();
    let go = d_out.data();

    let d_bias = if has_bias {
        let mut db = Tensor::zeros(&[cout]);
        db.data_mut()
            .par_iter_mut()
            .enumerate()
            .for_each(|(co, out_v)| {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let g = &go[(ni * cout + co) * plane_o..(ni * cout + co + 1) * plane_o];
                    for &gv in g {
                        acc += gv.to_acc();
                    }
                }
                *out_v = S::from_acc(acc);
            });
        Some(db)
    } else {
        None
    };

    // Weight gradient: one (cout, cin) kernel slab per task, reduced over
    // batch and output positions in a fixed order.
    let mut d_weight = Tensor::zeros(weight.shape());
    let kvol = kt * kh * kw;
    d_weight
        .data_mut()
        .par_chunks_mut(kvol)
        .enumerate()
        .for_each(|(task, dw_slab)| {
            let co = task / cin;
            let ci = task % cin;
            for ktt in 0..kt {
                let (t0, t1) = valid_out_range(t, ktt, st, pt, to);
                for khh in 0..kh {
                    let (h0, h1) = valid_out_range(h, khh, sh, ph, ho);
                    for kww in 0..kw {
                        let (w0, w1) = valid_out_range(w, kww, sw, pw, wo);
                        let mut acc = 0.0f64;
                        if w0 < w1 {
                            for ni in 0..n {
                                let xin = &x[(ni * cin + ci) * plane_i..];
                                let g = &go[(ni * cout + co) * plane_o..];
                                for tp in t0..t1 {
                                    let ti = tp * st + ktt - pt;
                                    for hp in h0..h1 {
                                        let hi = hp * sh + khh - ph;
                                        let ib = (ti * h + hi) * w + (w0 * sw + kww - pw);
                                        let ob = (tp * ho + hp) * wo + w0;
                                        let gs = &g[ob..ob + (w1 - w0)];
                                        if sw == 1 {
                                            let xs = &xin[ib..ib + (w1 - w0)];
                                            // Two interleaved accumulators break the
                                            // dependence chain; the split is fixed, so
                                            // the sum order is still deterministic.
                                            let mut a0 = 0.0f64;
                                            let mut a1 = 0.0f64;
                                            let pairs = gs.len() / 2;
                                            for i in 0..pairs {
                                                a0 += gs[2 * i].to_acc() * xs[2 * i].to_acc();
                                                a1 += gs[2 * i + 1].to_acc()
                                                    * xs[2 * i + 1].to_acc();
                                            }
                                            if gs.len() % 2 == 1 {
                                                a0 += gs[gs.len() - 1].to_acc()
                                                    * xs[gs.len() - 1].to_acc();
                                            }
                                            acc += a0 + a1;
                                        } else {
                                            for (wp, &gv) in gs.iter().enumerate() {
                                                acc += gv.to_acc() * xin[ib + wp * sw].to_acc();
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dw_slab[(ktt * kh + khh) * kw + kww] = S::from_acc(acc);
                    }
                }
            }
        });

    // Input gradient: one (n, cin) plane per task; scatter contributions from
    // every (cout, kernel offset) in a fixed order.
    let mut d_input = Tensor::zeros(input.shape());
    d_input
        .data_mut()
        .par_chunks_mut(plane_i)
        .enumerate()
        .for_each(|(task, dx_plane)| {
            let ni = task / cin;
            let ci = task % cin;
            let mut acc = vec![0.0f64; plane_i];
            for co in 0..cout {
                let g = &go[(ni * cout + co) * plane_o..(ni * cout + co + 1) * plane_o];
                for ktt in 0..kt {
                    let (t0, t1) = valid_out_range(t, ktt, st, pt, to);
                    for khh in 0..kh {
                        let (h0, h1) = valid_out_range(h, khh, sh, ph, ho);
                        for kww in 0..kw {
                            let (w0, w1) = valid_out_range(w, kww, sw, pw, wo);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv =
                                wd[(((co * cin + ci) * kt + ktt) * kh + khh) * kw + kww].to_acc();
                            for tp in t0..t1 {
                                let ti = tp * st + ktt - pt;
                                for hp in h0..h1 {
                                    let hi = hp * sh + khh - ph;
                                    let ib = (ti * h + hi) * w + (w0 * sw + kww - pw);
                                    let ob = (tp * ho + hp) * wo + w0;
                                    let gs = &g[ob..ob + (w1 - w0)];
                                    if sw == 1 {
                                        let dst = &mut acc[ib..ib + (w1 - w0)];
                                        for (a, &gv) in dst.iter_mut().zip(gs) {
                                            *a += wv * gv.to_acc();
                                        }
                                    } else {
                                        for (wp, &gv) in gs.iter().enumerate() {
                                            acc[ib + wp * sw] += wv * gv.to_acc();
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (o, a) in dx_plane.iter_mut().zip(acc.iter()) {
                *o = S::from_acc(*a);
            }
        });

    Ok(Conv3dGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}
