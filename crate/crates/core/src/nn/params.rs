//! Named parameter tensors with their Adam optimizer state.

use rand::Rng;

use crate::num::{real, Real};

use super::NnError;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A dense row-major matrix. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Initialization scheme for a fresh parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` with `fan_in = cols`,
    /// `fan_out = rows`.
    GlorotUniform,
}

/// Opaque handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(super) usize);

#[derive(Debug, Clone, PartialEq)]
struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    moment1: Tensor<T>,
    moment2: Tensor<T>,
}

/// All trainable tensors of a model plus shared Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
    adam_steps: u64,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            adam_steps: 0,
        }
    }

    /// Registers a tensor. Names must be unique and whitespace-free (they
    /// key checkpoint records).
    pub fn add_param(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        assert!(
            !name.is_empty() && !name.chars().any(char::is_whitespace),
            "parameter name must be non-empty and whitespace-free"
        );
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let mut value = Tensor::zeros(rows, cols);
        if init == Init::GlorotUniform {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for v in value.data_mut() {
                *v = real::<T>(rng.random_range(-limit..limit));
            }
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            moment1: Tensor::zeros(rows, cols),
            moment2: Tensor::zeros(rows, cols),
            value,
        });
        id
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Mutable access, for hand-constructing models in tests and for
    /// checkpoint loading.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn param_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameter values.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// True when every parameter value is finite.
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub(super) fn entry_parts(&self, idx: usize) -> (&str, &Tensor<T>, &Tensor<T>, &Tensor<T>) {
        let e = &self.entries[idx];
        (&e.name, &e.value, &e.moment1, &e.moment2)
    }

    pub(super) fn push_loaded(
        &mut self,
        name: String,
        value: Tensor<T>,
        moment1: Tensor<T>,
        moment2: Tensor<T>,
    ) {
        self.entries.push(ParamEntry {
            name,
            value,
            moment1,
            moment2,
        });
    }

    pub(super) fn set_adam_steps(&mut self, steps: u64) {
        self.adam_steps = steps;
    }

    /// One Adam update with bias correction
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    ///
    /// Rejects non-finite gradients, and reports a numeric error if any
    /// parameter leaves the finite range — the caller is expected to abort
    /// the run.
    pub fn adam_step(&mut self, grads: &GradientSet<T>, lr: T) -> Result<(), NnError> {
        if grads.tensors.len() != self.entries.len() {
            return Err(NnError::GradMismatch {
                name: "<set size>".to_string(),
            });
        }
        for (entry, grad) in self.entries.iter().zip(&grads.tensors) {
            if grad.rows != entry.value.rows || grad.cols != entry.value.cols {
                return Err(NnError::GradMismatch {
                    name: entry.name.clone(),
                });
            }
            if !grad.is_finite() {
                return Err(NnError::NonFinite { what: "gradient" });
            }
        }

        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let beta1 = real::<T>(ADAM_BETA1);
        let beta2 = real::<T>(ADAM_BETA2);
        let eps = real::<T>(ADAM_EPS);
        let bias1 = T::one() - beta1.powi(t);
        let bias2 = T::one() - beta2.powi(t);

        for (entry, grad) in self.entries.iter_mut().zip(&grads.tensors) {
            let m = entry.moment1.data_mut();
            let v = entry.moment2.data_mut();
            let p = entry.value.data_mut();
            for ((pi, (mi, vi)), &gi) in
                p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(grad.data())
            {
                *mi = beta1 * *mi + (T::one() - beta1) * gi;
                *vi = beta2 * *vi + (T::one() - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }

        if !self.all_finite() {
            return Err(NnError::NonFinite { what: "parameter after update" });
        }
        Ok(())
    }
}

/// Gradients aligned one-to-one with a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            tensors: params
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows, e.value.cols))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub(super) fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }
}
