//! Slice-level numeric kernels shared by the tape and the no-tape
//! inference paths. Keeping one implementation of each keeps the two paths
//! bit-identical.

use crate::num::Real;

use super::params::Tensor;

/// `out = W x + b`. `out` is resized to the layer's output width.
pub fn dense_into<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &[T], out: &mut Vec<T>) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), b.len());
    out.clear();
    out.extend(w.row_iter().zip(b.data()).map(|(row, &bias)| {
        row.iter()
            .zip(x)
            .fold(T::zero(), |acc, (&wij, &xj)| acc + wij * xj)
            + bias
    }));
}

/// Elementwise `max(0, x)` into `out`.
pub fn relu_into<T: Real>(x: &[T], out: &mut Vec<T>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }));
}

/// Numerically stable log-softmax via max subtraction.
pub fn log_softmax_into<T: Real>(x: &[T], out: &mut Vec<T>) {
    debug_assert!(!x.is_empty());
    let max = x.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let log_sum = x
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp())
        .ln();
    out.clear();
    out.extend(x.iter().map(|&v| v - max - log_sum));
}

/// Allocating wrapper around [`log_softmax_into`].
pub fn log_softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    log_softmax_into(x, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passes_input_through() {
        let mut w = Tensor::zeros(3, 3);
        for i in 0..3 {
            *w.get_mut(i, i) = 1.0;
        }
        let b = Tensor::zeros(3, 1);
        let mut out = Vec::new();
        dense_into(&w, &b, &[1.0, -2.0, 0.5], &mut out);
        assert_eq!(out, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn dense_zero_weights_yield_bias() {
        let w = Tensor::zeros(2, 3);
        let mut b = Tensor::zeros(2, 1);
        b.data_mut().copy_from_slice(&[4.0, -1.0]);
        let mut out = Vec::new();
        dense_into(&w, &b, &[9.0, 9.0, 9.0], &mut out);
        assert_eq!(out, vec![4.0, -1.0]);
    }

    #[test]
    fn relu_examples() {
        let mut out = Vec::new();
        relu_into(&[-1.0, 0.0, 2.0], &mut out);
        assert_eq!(out, vec![0.0, 0.0, 2.0]);
        relu_into(&[-3.0f64, -0.1], &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn log_softmax_two_equal_logits() {
        let out = log_softmax_slice(&[0.0f64, 0.0]);
        assert!((out[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((out[1] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let logits = [1.0f64, -2.0, 0.25, 7.5];
        let base = log_softmax_slice(&logits);
        let shifted: Vec<f64> = logits.iter().map(|&v| v + 123.456).collect();
        let out = log_softmax_slice(&shifted);
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_large_logits_do_not_overflow() {
        let out = log_softmax_slice(&[1000.0f64, 0.0]);
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);
        assert!(out.iter().all(|v| v.is_finite() || *v < 0.0));
    }

    #[test]
    fn log_softmax_exponentiates_to_unit_mass() {
        let out = log_softmax_slice(&[0.3f64, -4.0, 2.2, 0.0, 1.1]);
        let mass: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }
}
