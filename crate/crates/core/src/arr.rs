//! The autoregressive regression head.
//!
//! A dense encoder maps the input to a context vector `h`. Each of the `s`
//! digit positions is then predicted by one shared dense layer over
//! `h ⊕ pooled-prefix-embedding ⊕ step-index-embedding`, giving `b` logits
//! per step. The pooled prefix is the sum of digit embeddings plus their
//! positional embeddings, seeded with a learned start embedding, so the
//! conditioning input has a fixed size at every step.
//!
//! The head's parameter count is `(d_h + 2 d_e) b + b + (b + s) d_e + d_e`:
//! linear in `b` and `s`, while the number of representable buckets
//! `k = b^s` grows exponentially in `s`. That trade is the entire point.
//!
//! Two forward implementations exist: a recorded one for training and a
//! buffer-reusing one for inference. Both are built from the same kernels in
//! [`crate::nn::math`] and agree bit for bit; tests pin that.

use std::fmt;

use rand::Rng;

use crate::codec::{BucketSpec, CodecError, DigitCode};
use crate::nn::{
    math, FeedForward, MlpScratch, ModelParams, NnError, NodeRef, ParamId, Tape,
};
use crate::num::{real, Real};

/// Bucket-count guard for exact marginalization, which enumerates every code.
pub const MAX_ENUMERABLE_BUCKETS: u128 = 1 << 16;

#[derive(Debug)]
pub enum ArrError {
    Nn(NnError),
    Codec(CodecError),
    /// Step index at or beyond the sequence length.
    StepOutOfRange { step: usize, steps: usize },
    /// Prefix length does not equal the step index.
    PrefixLength { got: usize, expected: usize },
    /// A digit code that does not belong to this model's bucket spec.
    SpecMismatch { what: &'static str },
    /// Exact marginalization requested over too many buckets.
    TooManyBuckets { buckets: u128, limit: u128 },
}

impl fmt::Display for ArrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Nn(e) => write!(f, "{e}"),
            Self::Codec(e) => write!(f, "{e}"),
            Self::StepOutOfRange { step, steps } => {
                write!(f, "step {step} out of range [0, {steps})")
            }
            Self::PrefixLength { got, expected } => {
                write!(f, "prefix has {got} digits, step index requires {expected}")
            }
            Self::SpecMismatch { what } => write!(f, "digit code mismatch: {what}"),
            Self::TooManyBuckets { buckets, limit } => {
                write!(f, "cannot enumerate {buckets} buckets exactly (limit {limit})")
            }
        }
    }
}

impl std::error::Error for ArrError {}

impl From<NnError> for ArrError {
    fn from(e: NnError) -> Self {
        Self::Nn(e)
    }
}

impl From<CodecError> for ArrError {
    fn from(e: CodecError) -> Self {
        Self::Codec(e)
    }
}

/// Architecture of the encoder, step network, and embeddings.
#[derive(Debug, Clone)]
pub struct ArrConfig {
    pub input_dim: usize,
    /// Hidden widths of the encoder; the last entry is the context size.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the shared step network; empty means a single
    /// linear layer from the conditioning input to the logits.
    pub step_hidden: Vec<usize>,
    /// Width of digit/step/start embeddings.
    pub embed_dim: usize,
}

/// Recorded teacher-forced forward pass: one log-probability node per step,
/// paired with the forced digit, plus the summed negative log-likelihood.
pub struct TeacherForced {
    pub steps: Vec<(NodeRef, u32)>,
    pub nll: f64,
}

/// Reusable buffers for the inference path.
#[derive(Debug, Default)]
pub struct ArrScratch<T> {
    mlp: MlpScratch<T>,
    step_mlp: MlpScratch<T>,
    h: Vec<T>,
    pooled: Vec<T>,
    concat: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Real> ArrScratch<T> {
    pub fn new() -> Self {
        Self {
            mlp: MlpScratch::new(),
            step_mlp: MlpScratch::new(),
            h: Vec::new(),
            pooled: Vec::new(),
            concat: Vec::new(),
            log_probs: Vec::new(),
        }
    }
}

pub struct ArrModel<T> {
    params: ModelParams<T>,
    encoder: FeedForward,
    step_net: FeedForward,
    digit_emb: ParamId,
    step_emb: ParamId,
    start_emb: ParamId,
    spec: BucketSpec<T>,
    embed_dim: usize,
}

impl<T: Real> ArrModel<T> {
    pub fn new(config: &ArrConfig, spec: BucketSpec<T>, rng: &mut impl Rng) -> Self {
        assert!(!config.encoder_hidden.is_empty(), "encoder needs a hidden layer");
        let mut params = ModelParams::new();
        let mut dims = Vec::with_capacity(config.encoder_hidden.len() + 1);
        dims.push(config.input_dim);
        dims.extend_from_slice(&config.encoder_hidden);
        // The context vector is a linear image of the last hidden layer, so
        // coarse input distinctions (such as the subtask sign) reach the
        // step network without a saturating activation in the way.
        let encoder = FeedForward::new(&mut params, "encoder", &dims, false, rng);

        let d_h = encoder.output_dim();
        let d_e = config.embed_dim;
        let b = spec.base() as usize;
        let s = spec.steps() as usize;
        let mut step_dims = Vec::with_capacity(config.step_hidden.len() + 2);
        step_dims.push(d_h + 2 * d_e);
        step_dims.extend_from_slice(&config.step_hidden);
        step_dims.push(b);
        let step_net = FeedForward::new(&mut params, "head.step", &step_dims, false, rng);
        let digit_emb = params.add_param("head.digit_emb", b, d_e, crate::nn::Init::GlorotUniform, rng);
        let step_emb = params.add_param("head.step_emb", s, d_e, crate::nn::Init::GlorotUniform, rng);
        let start_emb = params.add_param("head.start_emb", 1, d_e, crate::nn::Init::GlorotUniform, rng);

        Self {
            params,
            encoder,
            step_net,
            digit_emb,
            step_emb,
            start_emb,
            spec,
            embed_dim: d_e,
        }
    }

    pub fn spec(&self) -> &BucketSpec<T> {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn base(&self) -> usize {
        self.spec.base() as usize
    }

    pub fn step_count(&self) -> usize {
        self.spec.steps() as usize
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Scalar parameters in the output head alone (everything but the
    /// encoder).
    pub fn head_param_count(&self) -> usize {
        let net: usize = self
            .step_net
            .layers()
            .iter()
            .map(|&(w, b)| self.params.tensor(w).len() + self.params.tensor(b).len())
            .sum();
        let tables: usize = [self.digit_emb, self.step_emb, self.start_emb]
            .iter()
            .map(|&id| self.params.tensor(id).len())
            .sum();
        net + tables
    }

    fn validate_code(&self, code: &DigitCode) -> Result<(), ArrError> {
        if code.len() != self.step_count() {
            return Err(ArrError::SpecMismatch { what: "sequence length" });
        }
        if code.digits().iter().any(|&d| d >= self.spec.base()) {
            return Err(ArrError::SpecMismatch { what: "digit alphabet" });
        }
        Ok(())
    }

    fn validate_prefix(&self, prefix: &[u32], t: usize) -> Result<(), ArrError> {
        if t >= self.step_count() {
            return Err(ArrError::StepOutOfRange {
                step: t,
                steps: self.step_count(),
            });
        }
        if prefix.len() != t {
            return Err(ArrError::PrefixLength {
                got: prefix.len(),
                expected: t,
            });
        }
        if prefix.iter().any(|&d| d >= self.spec.base()) {
            return Err(ArrError::SpecMismatch { what: "digit alphabet" });
        }
        Ok(())
    }

    /// Encodes an input into its context vector.
    pub fn encode_context(&self, x: &[T]) -> Result<Vec<T>, ArrError> {
        let mut scratch = MlpScratch::new();
        Ok(self.encoder.infer(&self.params, x, &mut scratch)?.to_vec())
    }

    fn encode_into(&self, x: &[T], scratch: &mut ArrScratch<T>) -> Result<(), ArrError> {
        let h = self.encoder.infer(&self.params, x, &mut scratch.mlp)?;
        scratch.h.clear();
        scratch.h.extend_from_slice(h);
        Ok(())
    }

    /// Pooled prefix embedding: start embedding plus, for each observed
    /// digit, its embedding and the positional embedding of its slot. The
    /// accumulation order matches the tape path exactly.
    fn pooled_into(&self, prefix: &[u32], out: &mut Vec<T>) {
        out.clear();
        out.extend_from_slice(self.params.tensor(self.start_emb).row(0));
        for (j, &d) in prefix.iter().enumerate() {
            for (o, &e) in out.iter_mut().zip(self.params.tensor(self.digit_emb).row(d as usize)) {
                *o = *o + e;
            }
            for (o, &e) in out.iter_mut().zip(self.params.tensor(self.step_emb).row(j)) {
                *o = *o + e;
            }
        }
    }

    /// Extends the pooled embedding by one observed digit at position `j`.
    fn pool_one(&self, pooled: &mut [T], digit: u32, j: usize) {
        for (o, &e) in pooled.iter_mut().zip(self.params.tensor(self.digit_emb).row(digit as usize)) {
            *o = *o + e;
        }
        for (o, &e) in pooled.iter_mut().zip(self.params.tensor(self.step_emb).row(j)) {
            *o = *o + e;
        }
    }

    /// Computes `scratch.log_probs` (and the logits feeding them) for step
    /// `t` given the context in `scratch.h` and prefix pooling in
    /// `scratch.pooled`. Returns the logits slice.
    fn step_from_pooled(&self, t: usize, scratch: &mut ArrScratch<T>) {
        scratch.concat.clear();
        scratch.concat.extend_from_slice(&scratch.h);
        scratch.concat.extend_from_slice(&scratch.pooled);
        scratch
            .concat
            .extend_from_slice(self.params.tensor(self.step_emb).row(t));
        let logits = self
            .step_net
            .infer(&self.params, &scratch.concat, &mut scratch.step_mlp)
            .expect("step network dimensions are fixed at construction");
        math::log_softmax_into(logits, &mut scratch.log_probs);
    }

    /// Logits for `p(digit_t | prefix, x)` given a precomputed context
    /// vector. The empty prefix (`t = 0`) conditions on the learned start
    /// embedding alone.
    pub fn step_logits(&self, h: &[T], prefix: &[u32], t: usize) -> Result<Vec<T>, ArrError> {
        self.validate_prefix(prefix, t)?;
        if h.len() != self.hidden_dim() {
            return Err(ArrError::Nn(NnError::DimMismatch {
                what: "context vector",
                expected: self.hidden_dim(),
                got: h.len(),
            }));
        }
        let mut scratch = ArrScratch::new();
        scratch.h.extend_from_slice(h);
        self.pooled_into(prefix, &mut scratch.pooled);
        self.step_from_pooled(t, &mut scratch);
        scratch.concat.clear();
        scratch.concat.extend_from_slice(&scratch.h);
        scratch.concat.extend_from_slice(&scratch.pooled);
        scratch
            .concat
            .extend_from_slice(self.params.tensor(self.step_emb).row(t));
        let logits = self
            .step_net
            .infer(&self.params, &scratch.concat, &mut scratch.step_mlp)?
            .to_vec();
        Ok(logits)
    }

    /// Log-probability vector for step `t`; see [`ArrModel::step_logits`].
    pub fn step_log_probs(&self, h: &[T], prefix: &[u32], t: usize) -> Result<Vec<T>, ArrError> {
        self.validate_prefix(prefix, t)?;
        if h.len() != self.hidden_dim() {
            return Err(ArrError::Nn(NnError::DimMismatch {
                what: "context vector",
                expected: self.hidden_dim(),
                got: h.len(),
            }));
        }
        let mut scratch = ArrScratch::new();
        scratch.h.extend_from_slice(h);
        self.pooled_into(prefix, &mut scratch.pooled);
        self.step_from_pooled(t, &mut scratch);
        Ok(scratch.log_probs)
    }

    /// Teacher-forced sequence log-probability `Σ_t log p(digit_t | ·)`.
    /// Always non-positive.
    pub fn sequence_log_prob(&self, x: &[T], code: &DigitCode) -> Result<T, ArrError> {
        self.validate_code(code)?;
        let mut scratch = ArrScratch::new();
        self.encode_into(x, &mut scratch)?;
        self.pooled_into(&[], &mut scratch.pooled);
        let mut total = T::zero();
        for (t, &digit) in code.digits().iter().enumerate() {
            self.step_from_pooled(t, &mut scratch);
            total = total + scratch.log_probs[digit as usize];
            if t + 1 < code.len() {
                self.pool_one(&mut scratch.pooled, digit, t);
            }
        }
        Ok(total)
    }

    fn sample_with_scratch(
        &self,
        rng: &mut impl Rng,
        scratch: &mut ArrScratch<T>,
    ) -> Vec<u32> {
        self.pooled_into(&[], &mut scratch.pooled);
        let steps = self.step_count();
        let mut digits = Vec::with_capacity(steps);
        for t in 0..steps {
            self.step_from_pooled(t, scratch);
            let u: f64 = rng.random();
            let mut acc = 0.0f64;
            let mut chosen = self.base() - 1;
            for (j, lq) in scratch.log_probs.iter().enumerate() {
                acc += lq.exp().to_f64().unwrap_or(0.0);
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            let digit = chosen as u32;
            digits.push(digit);
            if t + 1 < steps {
                self.pool_one(&mut scratch.pooled, digit, t);
            }
        }
        digits
    }

    /// Ancestral sampling: one categorical draw per step, each conditioned
    /// on the digits drawn so far.
    pub fn sample(&self, x: &[T], rng: &mut impl Rng) -> Result<DigitCode, ArrError> {
        let mut scratch = ArrScratch::new();
        self.encode_into(x, &mut scratch)?;
        let digits = self.sample_with_scratch(rng, &mut scratch);
        Ok(self.spec.code_from_digits(&digits)?)
    }

    /// Monte Carlo estimate of the predictive mean: the average bucket
    /// midpoint over `n` sampled codes. Always inside `[y_min, y_max]`.
    pub fn approx_mean(&self, x: &[T], n: usize, rng: &mut impl Rng) -> Result<T, ArrError> {
        assert!(n >= 1, "need at least one sample");
        let mut scratch = ArrScratch::new();
        self.encode_into(x, &mut scratch)?;
        let mut acc = T::zero();
        for _ in 0..n {
            let digits = self.sample_with_scratch(rng, &mut scratch);
            let index = self.spec.index_of_digits(&digits)?;
            acc = acc + self.spec.bucket_midpoint(index)?;
        }
        Ok(acc / real::<T>(n as f64))
    }

    /// Exact predictive mean by enumerating every code:
    /// `Σ_a p(a) · midpoint(a)`. Guarded to `k ≤ 2^16`.
    pub fn exact_mean(&self, x: &[T]) -> Result<T, ArrError> {
        if self.spec.bucket_count() > MAX_ENUMERABLE_BUCKETS {
            return Err(ArrError::TooManyBuckets {
                buckets: self.spec.bucket_count(),
                limit: MAX_ENUMERABLE_BUCKETS,
            });
        }
        let mut scratch = ArrScratch::new();
        self.encode_into(x, &mut scratch)?;

        let steps = self.step_count();
        let base = self.base();
        // Per-depth pooled buffers and per-depth step log-probabilities so
        // siblings reuse their parent's state.
        let mut pooled_at = vec![Vec::new(); steps + 1];
        self.pooled_into(&[], &mut pooled_at[0]);
        let mut log_probs_at: Vec<Vec<T>> = vec![Vec::new(); steps];

        let mut mean = T::zero();
        // Iterative DFS over digit prefixes.
        let mut digit_stack = vec![0usize; steps];
        let mut log_p_stack = vec![T::zero(); steps + 1];
        let mut index_stack = vec![0u128; steps + 1];
        let mut depth = 0usize;
        let mut descending = true;
        loop {
            if descending {
                scratch.pooled.clear();
                scratch.pooled.extend_from_slice(&pooled_at[depth]);
                self.step_from_pooled(depth, &mut scratch);
                log_probs_at[depth].clear();
                log_probs_at[depth].extend_from_slice(&scratch.log_probs);
                digit_stack[depth] = 0;
            }
            if digit_stack[depth] == base {
                // Exhausted this node; pop.
                if depth == 0 {
                    break;
                }
                depth -= 1;
                digit_stack[depth] += 1;
                descending = false;
                continue;
            }
            let d = digit_stack[depth];
            let log_p = log_p_stack[depth] + log_probs_at[depth][d];
            let index = index_stack[depth] * base as u128 + d as u128;
            if depth + 1 == steps {
                mean = mean + log_p.exp() * self.spec.bucket_midpoint(index)?;
                digit_stack[depth] += 1;
                descending = false;
            } else {
                log_p_stack[depth + 1] = log_p;
                index_stack[depth + 1] = index;
                let (head, tail) = pooled_at.split_at_mut(depth + 1);
                tail[0].clear();
                tail[0].extend_from_slice(&head[depth]);
                self.pool_one(&mut tail[0], d as u32, depth);
                depth += 1;
                descending = true;
            }
        }
        Ok(mean)
    }

    /// Records the teacher-forced forward pass for one sample and returns
    /// the per-step log-probability nodes (to seed `backward` with
    /// `-onehot(digit)`) together with the sample's negative log-likelihood.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<T>,
        x: &[T],
        code: &DigitCode,
    ) -> Result<TeacherForced, ArrError> {
        self.validate_code(code)?;
        let input = tape.input(x);
        let h = self.encoder.forward(&self.params, tape, input)?;
        let mut pooled = tape.embed(&self.params, self.start_emb, 0)?;
        let mut steps = Vec::with_capacity(code.len());
        let mut nll = 0.0f64;
        for (t, &digit) in code.digits().iter().enumerate() {
            let step_marker = tape.embed(&self.params, self.step_emb, t)?;
            let cat = tape.concat(&[h, pooled, step_marker]);
            let logits = self.step_net.forward(&self.params, tape, cat)?;
            let log_q = tape.log_softmax(logits)?;
            nll -= tape.value(log_q)[digit as usize].to_f64().unwrap_or(f64::NAN);
            steps.push((log_q, digit));
            if t + 1 < code.len() {
                let d_emb = tape.embed(&self.params, self.digit_emb, digit as usize)?;
                let p_emb = tape.embed(&self.params, self.step_emb, t)?;
                pooled = tape.add(pooled, d_emb)?;
                pooled = tape.add(pooled, p_emb)?;
            }
        }
        Ok(TeacherForced { steps, nll })
    }
}
