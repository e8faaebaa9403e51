//! The four training losses, each returning its value and an analytic
//! gradient with respect to the prediction.
//!
//! MSE and MAE act on real point predictions. The histogram cross-entropy
//! and the autoregressive sequence negative log-likelihood act on
//! log-probabilities and are functions of bucket indices/digits only, which
//! is what makes them indifferent to the absolute scale of the targets.
//!
//! Probabilities are handled in the log domain throughout; the cross-entropy
//! consumes `log q` directly so that large bucket counts cannot underflow.

use std::fmt;

use crate::codec::DigitCode;
use crate::num::Real;

/// Errors from loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Prediction or target is NaN/infinite.
    NonFinite { what: &'static str },
    /// Target histogram and predicted log-probabilities differ in length.
    ShapeMismatch { target: usize, prediction: usize },
    /// A digit in the code is outside the step distribution's support.
    DigitOutOfRange { step: usize, digit: u32, base: usize },
    /// Step count differs from the code length.
    StepCountMismatch { code: usize, steps: usize },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite { what } => write!(f, "{what} must be finite"),
            Self::ShapeMismatch { target, prediction } => {
                write!(f, "target has {target} buckets but prediction has {prediction}")
            }
            Self::DigitOutOfRange { step, digit, base } => {
                write!(f, "digit {digit} at step {step} outside [0, {base})")
            }
            Self::StepCountMismatch { code, steps } => {
                write!(f, "code has {code} digits but {steps} step distributions given")
            }
        }
    }
}

impl std::error::Error for LossError {}

/// A loss value together with its gradient.
///
/// For the scalar losses the gradient has one entry, `d loss / d v`. For
/// [`hl_cross_entropy`] it is the gradient with respect to the pre-softmax
/// logits, length `k`. For [`arr_nll`] it is the per-step logit gradients
/// flattened row-major, length `s * b` with step `t` occupying
/// `[t * b, (t + 1) * b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Squared error `(v - u)^2` with gradient `2 (v - u)`.
pub fn mse<T: Real>(v: T, u: T) -> Result<LossValue<T>, LossError> {
    if !v.is_finite() {
        return Err(LossError::NonFinite { what: "prediction" });
    }
    if !u.is_finite() {
        return Err(LossError::NonFinite { what: "target" });
    }
    let diff = v - u;
    Ok(LossValue {
        value: diff * diff,
        grad: vec![diff + diff],
    })
}

/// Absolute error `|v - u|` with subgradient `sign(v - u)`, taken as 0 at
/// `v == u`.
pub fn mae<T: Real>(v: T, u: T) -> Result<LossValue<T>, LossError> {
    if !v.is_finite() {
        return Err(LossError::NonFinite { what: "prediction" });
    }
    if !u.is_finite() {
        return Err(LossError::NonFinite { what: "target" });
    }
    let diff = v - u;
    let grad = if diff > T::zero() {
        T::one()
    } else if diff < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    Ok(LossValue {
        value: diff.abs(),
        grad: vec![grad],
    })
}

/// Cross-entropy `-Σ_j p_j log q_j` between a target histogram `p` and
/// predicted log-probabilities `log q`.
///
/// The gradient is taken with respect to the pre-softmax logits, where it
/// has the standard softmax–cross-entropy form `q - p`.
pub fn hl_cross_entropy<T: Real>(p: &[T], log_q: &[T]) -> Result<LossValue<T>, LossError> {
    if p.len() != log_q.len() {
        return Err(LossError::ShapeMismatch {
            target: p.len(),
            prediction: log_q.len(),
        });
    }
    let mut value = T::zero();
    for (&pj, &lqj) in p.iter().zip(log_q) {
        if pj != T::zero() {
            value = value - pj * lqj;
        }
    }
    let grad = p
        .iter()
        .zip(log_q)
        .map(|(&pj, &lqj)| lqj.exp() - pj)
        .collect();
    Ok(LossValue { value, grad })
}

/// Sequence negative log-likelihood of a digit code under per-step
/// log-probability vectors: `-Σ_t log q_t[digit_t]`.
///
/// The chain-rule factorization means the per-step logit gradient is again
/// `q_t - one_hot(digit_t)`; the returned gradient stacks the steps
/// row-major.
pub fn arr_nll<T: Real>(
    code: &DigitCode,
    step_log_probs: &[Vec<T>],
) -> Result<LossValue<T>, LossError> {
    if code.len() != step_log_probs.len() {
        return Err(LossError::StepCountMismatch {
            code: code.len(),
            steps: step_log_probs.len(),
        });
    }
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(step_log_probs.iter().map(Vec::len).sum());
    for (t, (&digit, log_q)) in code.digits().iter().zip(step_log_probs).enumerate() {
        let d = digit as usize;
        if d >= log_q.len() {
            return Err(LossError::DigitOutOfRange {
                step: t,
                digit,
                base: log_q.len(),
            });
        }
        value = value - log_q[d];
        for (j, &lq) in log_q.iter().enumerate() {
            let target = if j == d { T::one() } else { T::zero() };
            grad.push(lq.exp() - target);
        }
    }
    Ok(LossValue { value, grad })
}
