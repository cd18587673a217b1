//! Max pooling and global average pooling over `[N, C, T, H, W]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn pooled_extent(size: usize, k: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("maxpool3d: stride must be positive"));
    }
    if size < k {
        return Err(Error::shape(format!(
            "maxpool3d: window {k} exceeds extent {size}"
        )));
    }
    Ok((size - k) / stride + 1)
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat offset of its source element within the input (ties resolve to
/// the first element in window scan order, which the backward pass reuses).
pub fn maxpool3d_forward<S: Scalar>(
    input: &Tensor<S>,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(Tensor<S>, Vec<u32>)> {
    input.expect_rank(5, "maxpool3d input")?;
    let (n, c, t, h, w) = (
        input.dim(0),
        input.dim(1),
        input.dim(2),
        input.dim(3),
        input.dim(4),
    );
    let to = pooled_extent(t, window.0, stride.0)?;
    let ho = pooled_extent(h, window.1, stride.1)?;
    let wo = pooled_extent(w, window.2, stride.2)?;
    let plane_i = t * h * w;
    let plane_o = to * ho * wo;
    let x = input.data();

    let mut out = Tensor::zeros(&[n, c, to, ho, wo]);
    let mut arg = vec![0u32; n * c * plane_o];
    out.data_mut()
        .par_chunks_mut(plane_o)
        .zip(arg.par_chunks_mut(plane_o))
        .enumerate()
        .for_each(|(task, (out_plane, arg_plane))| {
            let base = task * plane_i;
            let xin = &x[base..base + plane_i];
            for tp in 0..to {
                for hp in 0..ho {
                    for wp in 0..wo {
                        let mut best = S::neg_infinity();
                        let mut best_at = 0usize;
                        for kt in 0..window.0 {
                            let ti = tp * stride.0 + kt;
                            for kh in 0..window.1 {
                                let hi = hp * stride.1 + kh;
                                let row = (ti * h + hi) * w + wp * stride.2;
                                for kw in 0..window.2 {
                                    let v = xin[row + kw];
                                    if v > best {
                                        best = v;
                                        best_at = row + kw;
                                    }
                                }
                            }
                        }
                        let o = (tp * ho + hp) * wo + wp;
                        out_plane[o] = best;
                        arg_plane[o] = (base + best_at) as u32;
                    }
                }
            }
        });
    Ok((out, arg))
}

/// Scatters upstream gradients to the argmax positions. Overlapping windows
/// accumulate.
pub fn maxpool3d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if argmax.len() != d_out.numel() {
        return Err(Error::shape(format!(
            "maxpool3d backward: {} argmax entries for {} gradient elements",
            argmax.len(),
            d_out.numel()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    for (&a, &g) in argmax.iter().zip(d_out.data()) {
        buf[a as usize] += g;
    }
    Ok(dx)
}

/// Mean over the spatio-temporal volume: `[N, C, T, H, W] -> [N, C]`.
pub fn global_avgpool_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.expect_rank(5, "global_avgpool input")?;
    let (n, c) = (input.dim(0), input.dim(1));
    let plane = input.dim(2) * input.dim(3) * input.dim(4);
    if plane == 0 {
        return Err(Error::shape("global_avgpool: empty volume"));
    }
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c]);
    out.data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(task, o)| {
            let mut acc = 0.0f64;
            for &v in &x[task * plane..(task + 1) * plane] {
                acc += v.to_acc();
            }
            *o = S::from_acc(acc / plane as f64);
        });
    Ok(out)
}

pub fn global_avgpool_backward<S: Scalar>(
    input_shape: &[usize],
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if input_shape.len() != 5 {
        return Err(Error::shape("global_avgpool backward: input rank must be 5"));
    }
    d_out.expect_shape(&[input_shape[0], input_shape[1]], "global_avgpool d_out")?;
    let plane = input_shape[2] * input_shape[3] * input_shape[4];
    let inv = 1.0 / plane as f64;
    let mut dx = Tensor::zeros(input_shape);
    let go = d_out.data();
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(task, dx_plane)| {
            let g = S::from_acc(go[task].to_acc() * inv);
            dx_plane.iter_mut().for_each(|o| *o = g);
        });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_maximum_and_first_tie() {
        // One channel, 1x2x4 volume; window 1x2x2 stride 1x1x2.
        let x = Tensor::<f32>::new(
            &[1, 1, 1, 2, 4],
            vec![
                1.0, 5.0, 2.0, 2.0, //
                5.0, 0.0, 2.0, 1.0,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool3d_forward(&x, (1, 2, 2), (1, 1, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 2.0]);
        // First window ties between offsets 1 and 4 with value 5; scan order
        // (kh, kw) visits offset 1 first. Second window ties among 2, 3, 6;
        // offset 2 wins.
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn maxpool_backward_scatters_to_argmax() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 1, 4], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let (_, arg) = maxpool3d_forward(&x, (1, 1, 2), (1, 1, 2)).unwrap();
        let g = Tensor::<f32>::new(&[1, 1, 1, 1, 2], vec![10.0, 20.0]).unwrap();
        let dx = maxpool3d_backward(x.shape(), &arg, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 10.0, 0.0, 20.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        assert!(maxpool3d_forward(&x, (3, 1, 1), (1, 1, 1)).is_err());
    }

    #[test]
    fn gap_means_each_channel() {
        let x = Tensor::<f32>::from_fn(&[2, 2, 1, 2, 2], |i| i as f32);
        let y = global_avgpool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.5, 5.5, 9.5, 13.5]);
        let g = Tensor::<f32>::new(&[2, 2], vec![4.0, 8.0, -4.0, 0.0]).unwrap();
        let dx = global_avgpool_backward(x.shape(), &g).unwrap();
        assert_eq!(dx.data()[0], 1.0);
        assert_eq!(dx.data()[4], 2.0);
        assert_eq!(dx.data()[8], -1.0);
        assert_eq!(dx.data()[12], 0.0);
    }
}
