//! Stacked dense layers with ReLU between them.

use rand::Rng;

use crate::num::Real;

use super::math;
use super::params::{Init, ModelParams, ParamId};
use super::tape::{NodeRef, Tape};
use super::NnError;

/// A feedforward stack: `dims = [in, h1, ..., out]`, ReLU after every layer
/// except optionally the last.
///
/// Holds only parameter handles; the values live in a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct FeedForward {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
    final_relu: bool,
}

impl FeedForward {
    /// Registers a fresh stack. Weights are Glorot-uniform, biases zero.
    pub fn new<T: Real>(
        params: &mut ModelParams<T>,
        prefix: &str,
        dims: &[usize],
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let w = params.add_param(
                    &format!("{prefix}.l{i}.w"),
                    pair[1],
                    pair[0],
                    Init::GlorotUniform,
                    rng,
                );
                let b = params.add_param(&format!("{prefix}.l{i}.b"), pair[1], 1, Init::Zeros, rng);
                (w, b)
            })
            .collect();
        Self {
            layers,
            dims: dims.to_vec(),
            final_relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `(weight, bias)` handles per layer, input side first.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Recorded forward pass.
    pub fn forward<T: Real>(
        &self,
        params: &ModelParams<T>,
        tape: &mut Tape<T>,
        x: NodeRef,
    ) -> Result<NodeRef, NnError> {
        let last = self.layers.len() - 1;
        let mut node = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            node = tape.dense(params, w, b, node)?;
            if i < last || self.final_relu {
                node = tape.relu(node);
            }
        }
        Ok(node)
    }

    /// Tape-free forward pass for inference loops. Returns a slice into the
    /// scratch buffers; bit-identical to [`FeedForward::forward`].
    pub fn infer<'s, T: Real>(
        &self,
        params: &ModelParams<T>,
        x: &[T],
        scratch: &'s mut MlpScratch<T>,
    ) -> Result<&'s [T], NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        scratch.a.clear();
        scratch.a.extend_from_slice(x);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            math::dense_into(params.tensor(w), params.tensor(b), &scratch.a, &mut scratch.b);
            if i < last || self.final_relu {
                math::relu_into(&scratch.b, &mut scratch.a);
            } else {
                std::mem::swap(&mut scratch.a, &mut scratch.b);
            }
        }
        Ok(&scratch.a)
    }
}

/// Ping-pong buffers for [`FeedForward::infer`].
#[derive(Debug, Default)]
pub struct MlpScratch<T> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> MlpScratch<T> {
    pub fn new() -> Self {
        Self {
            a: Vec::new(),
            b: Vec::new(),
        }
    }
}
