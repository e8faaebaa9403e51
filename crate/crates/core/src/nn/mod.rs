//! Minimal dense neural-network engine.
//!
//! Just enough machinery for the experiments: matrix–vector layers, ReLU,
//! log-softmax, embedding tables, tape-based reverse-mode differentiation,
//! and Adam. Single-threaded and deterministic: identical seed and
//! configuration give bit-identical parameter trajectories.

mod checkpoint;
pub mod math;
mod mlp;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use mlp::{FeedForward, MlpScratch};
pub use params::{GradientSet, Init, ModelParams, ParamId, Tensor};
pub use tape::{NodeRef, Tape};

use std::fmt;

/// Errors from engine operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    /// Vector or tensor dimensions do not line up.
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// NaN or infinity where a finite value is required.
    NonFinite { what: &'static str },
    /// Embedding lookup outside the table.
    TokenOutOfRange { token: usize, rows: usize },
    /// Backward called on a tape that was already consumed.
    TapeConsumed,
    /// Gradient set does not match the parameter set it is applied to.
    GradMismatch { name: String },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected dimension {expected}, got {got}")
            }
            Self::NonFinite { what } => write!(f, "{what} is not finite"),
            Self::TokenOutOfRange { token, rows } => {
                write!(f, "token {token} outside embedding table of {rows} rows")
            }
            Self::TapeConsumed => write!(f, "tape already consumed by backward; reset it first"),
            Self::GradMismatch { name } => {
                write!(f, "gradient shape does not match parameter `{name}`")
            }
        }
    }
}

impl std::error::Error for NnError {}
