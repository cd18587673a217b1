//! Fully connected layer: `y = x W + b`.
//!
//! Layouts: input `[N, D]`, weight `[D, K]`, bias `[K]`, output `[N, K]`.

use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct LinearGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn linear_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    input.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (n, d) = (input.dim(0), input.dim(1));
    let k = weight.dim(1);
    weight.expect_shape(&[d, k], "linear weight")?;
    bias.expect_shape(&[k], "linear bias")?;

    let x = input.data();
    let wd = weight.data();
    let b = bias.data();
    let mut out = Tensor::zeros(&[n, k]);
    out.data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(ni, row)| {
            let xr = &x[ni * d..(ni + 1) * d];
            let mut acc: Vec<f64> = b.iter().map(|v| v.to_acc()).collect();
            for (di, &xv) in xr.iter().enumerate() {
                let xa = xv.to_acc();
                let wr = &wd[di * k..(di + 1) * k];
                for (a, &wv) in acc.iter_mut().zip(wr) {
                    *a += xa * wv.to_acc();
                }
            }
            for (out_v, a) in row.iter_mut().zip(acc) {
                *out_v = S::from_acc(a);
            }
        });
    Ok(out)
}

pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    input.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (n, d) = (input.dim(0), input.dim(1));
    let k = weight.dim(1);
    weight.expect_shape(&[d, k], "linear weight")?;
    d_out.expect_shape(&[n, k], "linear d_out")?;
    let x = input.data();
    let wd = weight.data();
    let go = d_out.data();

    let mut d_input = Tensor::zeros(&[n, d]);
    d_input
        .data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(ni, row)| {
            let gr = &go[ni * k..(ni + 1) * k];
            for (di, out_v) in row.iter_mut().enumerate() {
                let wr = &wd[di * k..(di + 1) * k];
                let mut acc = 0.0f64;
                for (&gv, &wv) in gr.iter().zip(wr) {
                    acc += gv.to_acc() * wv.to_acc();
                }
                *out_v = S::from_acc(acc);
            }
        });

    let mut d_weight = Tensor::zeros(&[d, k]);
    d_weight
        .data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(di, row)| {
            let mut acc = vec![0.0f64; k];
            for ni in 0..n {
                let xa = x[ni * d + di].to_acc();
                let gr = &go[ni * k..(ni + 1) * k];
                for (a, &gv) in acc.iter_mut().zip(gr) {
                    *a += xa * gv.to_acc();
                }
            }
            for (out_v, a) in row.iter_mut().zip(acc) {
                *out_v = S::from_acc(a);
            }
        });

    let mut d_bias = Tensor::zeros(&[k]);
    d_bias
        .data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(ki, out_v)| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                acc += go[ni * k + ki].to_acc();
            }
            *out_v = S::from_acc(acc);
        });

    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}
