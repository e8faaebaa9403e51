//! Core library for regression on targets that span many scales.
//!
//! The pieces, bottom up:
//!
//! - [`codec`]: real targets to histogram buckets to base-b digit codes and
//!   back, plus target normalization.
//! - [`losses`]: MSE, MAE, histogram cross-entropy, and the autoregressive
//!   sequence negative log-likelihood, each with analytic gradients.
//! - [`nn`]: a minimal dense network engine — tape-based reverse-mode
//!   differentiation, embeddings, and Adam.
//! - [`arr`]: the autoregressive regression head built on the engine:
//!   digit-by-digit prediction, sampling, and mean estimation.
//! - [`data`]: the toy 1-D multi-scale generators and the MNIST
//!   composite-digit regression domain.
//! - [`harness`]: training runs for all four objectives, learning-rate
//!   sweeps across target magnitudes, and analytic memory accounting.
//!
//! All numeric code is generic over [`num::Real`] (`f32` or `f64`); the
//! aliases below pin the `f64` instantiations the experiment harness uses.

pub mod arr;
pub mod codec;
pub mod data;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod num;

pub use codec::{BucketSpec, CodecError, DigitCode, Normalizer};
pub use losses::{LossError, LossValue};
pub use num::Real;

/// Default training precision.
pub type Scalar = f64;

pub type BucketSpec64 = codec::BucketSpec<f64>;
pub type Normalizer64 = codec::Normalizer<f64>;
pub type LossValue64 = losses::LossValue<f64>;
pub type Tape64 = nn::Tape<f64>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type GradientSet64 = nn::GradientSet<f64>;
pub type ArrModel64 = arr::ArrModel<f64>;
pub type TrainConfig64 = harness::TrainConfig<f64>;
pub type RunMetrics64 = harness::RunMetrics<f64>;
