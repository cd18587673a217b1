//! Rectified linear unit.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|x| if x > S::zero() { x } else { S::zero() })
}

/// Gradient is passed where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, d_out: &Tensor<S>) -> Result<Tensor<S>> {
    d_out.expect_shape(input.shape(), "relu d_out")?;
    let mut dx = Tensor::zeros(input.shape());
    for ((o, &x), &g) in dx
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(d_out.data())
    {
        if x > S::zero() {
            *o = g;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_clamps_negatives_and_backward_masks() {
        let x = Tensor::<f32>::new(&[5], vec![-2.0, -0.0, 0.0, 0.5, 3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.5, 3.0]);
        let g = Tensor::<f32>::filled(&[5], 1.0);
        let dx = relu_backward(&x, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
