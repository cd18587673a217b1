//! Softmax cross-entropy over logits `[N, K]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction. Returned probabilities are f64 so
/// downstream averaging (clip-score ensembling) keeps precision.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    logits.expect_rank(2, "softmax logits")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    let x = logits.data();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let row = &x[ni * k..(ni + 1) * k];
        let m = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_acc()));
        let mut p: Vec<f64> = row.iter().map(|&v| (v.to_acc() - m).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        out.push(p);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits, `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(f64, Tensor<S>)> {
    logits.expect_rank(2, "cross-entropy logits")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::shape(format!(
            "cross-entropy: {} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(format!(
            "cross-entropy: label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(&[n, k]);
    let inv_n = 1.0 / n as f64;
    for (ni, p) in probs.iter().enumerate() {
        // log p_y computed from the probability; max subtraction already
        // happened so p_y is well above underflow for realistic logits.
        loss -= p[labels[ni]].max(f64::MIN_POSITIVE).ln();
        let row = &mut grad.data_mut()[ni * k..(ni + 1) * k];
        for (ki, o) in row.iter_mut().enumerate() {
            let indicator = if ki == labels[ni] { 1.0 } else { 0.0 };
            *o = S::from_acc((p[ki] - indicator) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Row-wise argmax accuracy.
pub fn top1_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    logits.expect_rank(2, "top1 logits")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n || n == 0 {
        return Err(Error::shape("top1: label count must match non-empty batch"));
    }
    let x = logits.data();
    let mut hits = 0usize;
    for ni in 0..n {
        let row = &x[ni * k..(ni + 1) * k];
        let mut best = 0usize;
        for ki in 1..k {
            if row[ki] > row[best] {
                best = ki;
            }
        }
        if best == labels[ni] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_under_large_logits() {
        let logits = Tensor::<f32>::new(&[2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0])
            .unwrap();
        let p = softmax(&logits).unwrap();
        for row in &p {
            let z: f64 = row.iter().sum();
            assert!((z - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v.is_finite()));
        }
        assert!(p[0][1] > p[0][0] && p[0][0] > p[0][2]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[4, 6]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((loss - (6.0f64).ln()).abs() < 1e-12);
        // Gradient rows sum to zero.
        for ni in 0..4 {
            let s: f64 = grad.data()[ni * 6..(ni + 1) * 6].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn top1_counts_argmax_matches() {
        let logits =
            Tensor::<f32>::new(&[2, 3], vec![0.1, 0.9, 0.0, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 2]).unwrap(), 0.5);
    }
}
