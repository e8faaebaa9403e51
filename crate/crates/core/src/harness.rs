//! Experiment orchestration: trains all four objectives on the toy and
//! MNIST domains, evaluates per-subtask squared error, runs learning-rate
//! sweeps across target magnitudes, and produces the analytic memory
//! accounting report.
//!
//! All randomness derives from the run seed through fixed stream ids, so a
//! config reproduces its results exactly. A sweep may execute its cells on
//! multiple threads; each cell is self-seeded and results merge by index,
//! so the table is identical either way.

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::arr::{ArrConfig, ArrError, ArrModel, MAX_ENUMERABLE_BUCKETS};
use crate::codec::{BucketSpec, CodecError, Normalizer};
use crate::data::{
    load_mnist_idx, Batch, DataError, MnistImages, MnistSampler, Sample, SubtaskSpec, SubtaskTag,
    ToySampler, COMPOSITE_PIXELS,
};
use crate::losses;
use crate::nn::{FeedForward, GradientSet, MlpScratch, ModelParams, NnError, Tape};
use crate::num::{real, Real};

// Stream ids carving independent RNG sequences out of one run seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL_SET: u64 = 2;
const STREAM_EVAL_SAMPLING: u64 = 3;
const STREAM_NORMALIZER: u64 = 4;

/// Targets drawn to fit the normalizer for the normalized-MSE baseline;
/// stands in for a training-set statistic on the streaming domains.
const NORMALIZER_PILOT_SAMPLES: usize = 100_000;

#[derive(Debug)]
pub enum HarnessError {
    Config { message: String },
    Data(DataError),
    Codec(CodecError),
    Nn(NnError),
    Arr(ArrError),
    Io(std::io::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { message } => write!(f, "invalid config: {message}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Codec(e) => write!(f, "{e}"),
            Self::Nn(e) => write!(f, "{e}"),
            Self::Arr(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}

impl From<CodecError> for HarnessError {
    fn from(e: CodecError) -> Self {
        Self::Codec(e)
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        Self::Nn(e)
    }
}

impl From<ArrError> for HarnessError {
    fn from(e: ArrError) -> Self {
        Self::Arr(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn config_err(message: impl Into<String>) -> HarnessError {
    HarnessError::Config { message: message.into() }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Mse,
    /// MSE on normalized targets, denormalized at evaluation time.
    MseNorm,
    Mae,
    /// Autoregressive digit-sequence negative log-likelihood.
    Arr,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mse => write!(f, "MSE"),
            Self::MseNorm => write!(f, "MSE+norm"),
            Self::Mae => write!(f, "MAE"),
            Self::Arr => write!(f, "ARR"),
        }
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "mse+norm" | "mse_norm" | "msenorm" => Ok(Self::MseNorm),
            "mae" => Ok(Self::Mae),
            "arr" => Ok(Self::Arr),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Toy1d,
    Mnist,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy1d => write!(f, "toy1d"),
            Self::Mnist => write!(f, "mnist"),
        }
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "toy1d" | "toy" => Ok(Self::Toy1d),
            "mnist" => Ok(Self::Mnist),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// Full specification of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub objective: Objective,
    pub domain: Domain,
    pub subtask_a: SubtaskSpec,
    pub subtask_b: Option<SubtaskSpec>,
    /// Digit alphabet size for the autoregressive head.
    pub base: u32,
    /// Autoregressive steps (digits per target).
    pub steps: u32,
    pub batch_size: usize,
    pub total_samples: u64,
    pub lr: T,
    pub seed: u64,
    /// Evaluate every this many gradient steps (plus step 0 and the end).
    pub eval_interval: u64,
    pub eval_set_size: usize,
    /// Monte Carlo sample count for the autoregressive mean estimate.
    pub mean_samples: usize,
    pub hidden_width: usize,
    pub encoder_layers: usize,
    /// Hidden width of the shared autoregressive step network; 0 collapses
    /// it to a single linear layer.
    pub step_hidden: usize,
    pub embed_dim: usize,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
}

impl<T: Real> TrainConfig<T> {
    /// Desk-scale defaults: batch 256 x 2000 steps, hidden width 128.
    /// The full-scale protocol (batch 1000 x 10000 steps) is reachable by
    /// overriding `batch_size`/`total_samples`.
    pub fn desk(
        objective: Objective,
        domain: Domain,
        subtask_a: SubtaskSpec,
        subtask_b: Option<SubtaskSpec>,
        lr: T,
        seed: u64,
    ) -> Self {
        Self {
            objective,
            domain,
            subtask_a,
            subtask_b,
            base: 10,
            steps: 8,
            batch_size: 256,
            total_samples: 512_000,
            lr,
            seed,
            eval_interval: 100,
            eval_set_size: 4096,
            mean_samples: 100,
            hidden_width: 128,
            encoder_layers: 2,
            step_hidden: 64,
            embed_dim: 32,
            mnist_images: None,
            mnist_labels: None,
        }
    }

    pub fn gradient_steps(&self) -> u64 {
        self.total_samples / self.batch_size as u64
    }

    /// Width of the feature vector the networks actually see.
    pub fn input_dim(&self) -> usize {
        match self.domain {
            Domain::Toy1d => 2,
            Domain::Mnist => COMPOSITE_PIXELS,
        }
    }

    /// The sweep magnitude, when the run is a single-target `sin_m` cell.
    pub fn magnitude(&self) -> Option<i32> {
        match (self.subtask_a, self.subtask_b) {
            (SubtaskSpec::SinM { magnitude }, None) => Some(magnitude),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return Err(config_err("lr must be positive and finite"));
        }
        if self.batch_size < 1 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.objective == Objective::Arr {
            if self.base < 2 {
                return Err(config_err("base must be at least 2 for ARR"));
            }
            if self.steps < 1 {
                return Err(config_err("steps must be at least 1 for ARR"));
            }
        }
        if self.eval_interval < 1 {
            return Err(config_err("eval_interval must be at least 1"));
        }
        if self.eval_set_size < 1 {
            return Err(config_err("eval_set_size must be at least 1"));
        }
        if self.mean_samples < 1 {
            return Err(config_err("mean_samples must be at least 1"));
        }
        if self.hidden_width < 1 || self.encoder_layers < 1 {
            return Err(config_err("encoder needs at least one layer of width >= 1"));
        }
        if self.embed_dim < 1 {
            return Err(config_err("embed_dim must be at least 1"));
        }
        if let Some(b) = &self.subtask_b {
            if b.is_sin() == self.subtask_a.is_sin() {
                return Err(config_err(
                    "subtask pair must mix one sin and one log function",
                ));
            }
        }
        if self.domain == Domain::Mnist
            && (self.mnist_images.is_none() || self.mnist_labels.is_none())
        {
            return Err(config_err(
                "mnist domain requires mnist_images and mnist_labels paths",
            ));
        }
        Ok(())
    }

    /// Bucket range: the analytic min/max of the mixed target range with a
    /// 5% margin on each side; out-of-range stragglers clamp at encode
    /// time.
    pub fn bucket_spec(&self) -> Result<BucketSpec<T>, HarnessError> {
        let (mut lo, mut hi) = self.subtask_a.target_range();
        if let Some(b) = &self.subtask_b {
            let (blo, bhi) = b.target_range();
            lo = lo.min(blo);
            hi = hi.max(bhi);
        }
        let margin = 0.05 * (hi - lo);
        Ok(BucketSpec::new(
            real::<T>(lo - margin),
            real::<T>(hi + margin),
            self.base,
            self.steps,
        )?)
    }
}

/// Model-side input featurization.
///
/// The toy domain's subtask tag lives in the sign of a scalar that can be
/// arbitrarily close to zero, so the raw input is expanded to
/// `[x, sign(x)]`: every objective sees the tag at full strength no matter
/// how small `|x|` is. MNIST inputs pass through unchanged (inversion flips
/// every pixel, which is never a borderline signal).
pub fn featurize<T: Real>(domain: Domain, input: &[T]) -> Vec<T> {
    match domain {
        Domain::Toy1d => {
            let x = input[0];
            let sign = if x > T::zero() { T::one() } else { -T::one() };
            vec![x, sign]
        }
        Domain::Mnist => input.to_vec(),
    }
}

/// Squared-error breakdown of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBreakdown<T> {
    pub subtask_a: Option<T>,
    pub subtask_b: Option<T>,
    pub combined: T,
    pub count_a: usize,
    pub count_b: usize,
}

/// Mean squared error of `predict` against raw targets, partitioned by
/// subtask tag. The combined figure is exactly the sample-count-weighted
/// mean of the per-subtask figures.
pub fn evaluate<T: Real>(
    mut predict: impl FnMut(&[T]) -> T,
    eval_set: &[Sample<T>],
) -> EvalBreakdown<T> {
    assert!(!eval_set.is_empty(), "evaluation set must be nonempty");
    let mut sum_a = T::zero();
    let mut sum_b = T::zero();
    let mut count_a = 0usize;
    let mut count_b = 0usize;
    for sample in eval_set {
        let v = predict(&sample.input);
        let d = v - sample.target;
        let sq = d * d;
        match sample.subtask {
            SubtaskTag::A => {
                sum_a = sum_a + sq;
                count_a += 1;
            }
            SubtaskTag::B => {
                sum_b = sum_b + sq;
                count_b += 1;
            }
        }
    }
    let combined = (sum_a + sum_b) / real::<T>((count_a + count_b) as f64);
    EvalBreakdown {
        subtask_a: (count_a > 0).then(|| sum_a / real::<T>(count_a as f64)),
        subtask_b: (count_b > 0).then(|| sum_b / real::<T>(count_b as f64)),
        combined,
        count_a,
        count_b,
    }
}

/// One evaluation record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord<T> {
    pub step: u64,
    /// Sampled-mean prediction error (the paper's protocol) per subtask.
    pub error_a: Option<T>,
    pub error_b: Option<T>,
    pub error_combined: T,
    /// Exact-marginal prediction error, recorded alongside the sampled one
    /// whenever the bucket count is enumerable (autoregressive runs only).
    pub exact_error_combined: Option<T>,
    /// Mean objective loss over the evaluation set (normalized space for
    /// MSE+norm, negative log-likelihood for ARR).
    pub loss: T,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunMetrics<T> {
    pub objective: Objective,
    pub lr: T,
    pub magnitude: Option<i32>,
    pub records: Vec<EvalRecord<T>>,
    pub diverged_at: Option<u64>,
    pub wall_clock: Duration,
}

impl<T: Real> RunMetrics<T> {
    /// Final combined error, with divergence ordered worse than everything.
    pub fn final_error(&self) -> T {
        if self.diverged_at.is_some() {
            return T::infinity();
        }
        match self.records.last() {
            Some(r) if r.error_combined.is_finite() => r.error_combined,
            _ => T::infinity(),
        }
    }

    pub fn final_error_a(&self) -> Option<T> {
        if self.diverged_at.is_some() {
            return Some(T::infinity());
        }
        self.records.last().and_then(|r| r.error_a)
    }

    pub fn final_error_b(&self) -> Option<T> {
        if self.diverged_at.is_some() {
            return Some(T::infinity());
        }
        self.records.last().and_then(|r| r.error_b)
    }
}

enum Source<T> {
    Toy(ToySampler<T>),
    Mnist(MnistSampler<T>),
}

impl<T: Real> Source<T> {
    fn batch(&mut self, n: usize) -> Batch<T> {
        match self {
            Self::Toy(s) => s.batch(n),
            Self::Mnist(s) => s.batch(n),
        }
    }
}

enum ModelKind<T> {
    Point {
        params: ModelParams<T>,
        net: FeedForward,
        normalizer: Option<Normalizer<T>>,
    },
    Arr(Box<ArrModel<T>>),
}

enum StepOutcome<T> {
    Loss(T),
    /// Numeric blow-up: recorded, not crashed.
    Diverged,
}

fn make_source<T: Real>(
    config: &TrainConfig<T>,
    images: Option<&Arc<MnistImages>>,
    stream: u64,
) -> Result<Source<T>, HarnessError> {
    match config.domain {
        Domain::Toy1d => Ok(Source::Toy(ToySampler::new(
            config.subtask_a,
            config.subtask_b,
            config.seed,
            stream,
        )?)),
        Domain::Mnist => {
            let images = images.expect("mnist images preloaded by caller");
            Ok(Source::Mnist(MnistSampler::new(
                Arc::clone(images),
                config.subtask_a,
                config.subtask_b,
                config.seed,
                stream,
            )?))
        }
    }
}

fn load_images_if_needed<T: Real>(
    config: &TrainConfig<T>,
) -> Result<Option<Arc<MnistImages>>, HarnessError> {
    if config.domain != Domain::Mnist {
        return Ok(None);
    }
    let images = config.mnist_images.as_ref().unwrap();
    let labels = config.mnist_labels.as_ref().unwrap();
    Ok(Some(Arc::new(load_mnist_idx(images, labels)?)))
}

fn build_model<T: Real>(
    config: &TrainConfig<T>,
    images: Option<&Arc<MnistImages>>,
) -> Result<ModelKind<T>, HarnessError> {
    let mut init_rng = ChaCha12Rng::seed_from_u64(config.seed);
    init_rng.set_stream(STREAM_INIT);
    let input_dim = config.input_dim();
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat(config.hidden_width).take(config.encoder_layers));

    match config.objective {
        Objective::Arr => {
            let spec = config.bucket_spec()?;
            let arr_config = ArrConfig {
                input_dim,
                encoder_hidden: dims[1..].to_vec(),
                step_hidden: if config.step_hidden > 0 {
                    vec![config.step_hidden]
                } else {
                    Vec::new()
                },
                embed_dim: config.embed_dim,
            };
            Ok(ModelKind::Arr(Box::new(ArrModel::new(
                &arr_config,
                spec,
                &mut init_rng,
            ))))
        }
        Objective::Mse | Objective::Mae | Objective::MseNorm => {
            dims.push(1);
            let mut params = ModelParams::new();
            let net = FeedForward::new(&mut params, "net", &dims, false, &mut init_rng);
            let normalizer = if config.objective == Objective::MseNorm {
                let mut pilot = make_source(config, images, STREAM_NORMALIZER)?;
                let mut targets = Vec::with_capacity(NORMALIZER_PILOT_SAMPLES);
                while targets.len() < NORMALIZER_PILOT_SAMPLES {
                    let chunk = (NORMALIZER_PILOT_SAMPLES - targets.len()).min(8192);
                    targets.extend(pilot.batch(chunk).samples.into_iter().map(|s| s.target));
                }
                Some(Normalizer::fit(&targets)?)
            } else {
                None
            };
            Ok(ModelKind::Point { params, net, normalizer })
        }
    }
}

fn draw_eval_set<T: Real>(
    config: &TrainConfig<T>,
    images: Option<&Arc<MnistImages>>,
) -> Result<Vec<Sample<T>>, HarnessError> {
    let mut source = make_source(config, images, STREAM_EVAL_SET)?;
    let mut set = source.batch(config.eval_set_size).samples;
    if config.subtask_b.is_some() {
        // Both subtasks must be represented; top up in the astronomically
        // unlikely case a side is missing.
        while !set.iter().any(|s| s.subtask == SubtaskTag::A)
            || !set.iter().any(|s| s.subtask == SubtaskTag::B)
        {
            set.extend(source.batch(64).samples);
        }
    }
    Ok(set)
}

/// Distinguishes numeric blow-up (a recordable outcome) from genuine usage
/// errors (propagated).
fn divergence_or_error<T>(e: HarnessError) -> Result<StepOutcome<T>, HarnessError> {
    match &e {
        HarnessError::Nn(NnError::NonFinite { .. }) => Ok(StepOutcome::Diverged),
        HarnessError::Arr(ArrError::Nn(NnError::NonFinite { .. })) => Ok(StepOutcome::Diverged),
        _ => Err(e),
    }
}

fn train_step<T: Real>(
    model: &mut ModelKind<T>,
    objective: Objective,
    domain: Domain,
    batch: &Batch<T>,
    lr: T,
    tape: &mut Tape<T>,
    grads: &mut GradientSet<T>,
) -> Result<StepOutcome<T>, HarnessError> {
    grads.reset();
    let batch_len = batch.samples.len();
    let inv_batch = T::one() / real::<T>(batch_len as f64);
    let mut loss_sum = T::zero();

    match model {
        ModelKind::Point { params, net, normalizer } => {
            for sample in &batch.samples {
                tape.reset();
                let features = featurize(domain, &sample.input);
                let x = tape.input(&features);
                let out = net.forward(params, tape, x)?;
                let v = tape.value(out)[0];
                let u = match normalizer {
                    Some(n) => n.normalize(sample.target),
                    None => sample.target,
                };
                if !v.is_finite() {
                    return Ok(StepOutcome::Diverged);
                }
                let loss = match objective {
                    Objective::Mae => losses::mae(v, u),
                    _ => losses::mse(v, u),
                };
                let loss = match loss {
                    Ok(l) => l,
                    Err(_) => return Ok(StepOutcome::Diverged),
                };
                loss_sum = loss_sum + loss.value;
                let seed: Vec<T> = loss.grad.iter().map(|&g| g * inv_batch).collect();
                tape.backward(params, &[(out, seed)], grads)?;
            }
            match params.adam_step(grads, lr) {
                Ok(()) => {}
                Err(e) => return divergence_or_error(HarnessError::Nn(e)),
            }
        }
        ModelKind::Arr(arr) => {
            for sample in &batch.samples {
                tape.reset();
                let features = featurize(domain, &sample.input);
                let code = arr.spec().encode(sample.target)?;
                let tf = match arr.teacher_forced(tape, &features, &code) {
                    Ok(tf) => tf,
                    Err(e) => return divergence_or_error(HarnessError::Arr(e)),
                };
                loss_sum = loss_sum + real::<T>(tf.nll);
                let seeds: Vec<_> = tf
                    .steps
                    .iter()
                    .map(|&(node, digit)| {
                        let mut seed = vec![T::zero(); arr.base()];
                        seed[digit as usize] = -inv_batch;
                        (node, seed)
                    })
                    .collect();
                tape.backward(arr.params(), &seeds, grads)?;
            }
            match arr.params_mut().adam_step(grads, lr) {
                Ok(()) => {}
                Err(e) => return divergence_or_error(HarnessError::Nn(e)),
            }
        }
    }
    Ok(StepOutcome::Loss(loss_sum * inv_batch))
}

fn eval_model<T: Real>(
    model: &ModelKind<T>,
    objective: Objective,
    config: &TrainConfig<T>,
    eval_set: &[Sample<T>],
    eval_rng: &mut ChaCha12Rng,
    step: u64,
) -> Result<EvalRecord<T>, HarnessError> {
    match model {
        ModelKind::Point { params, net, normalizer } => {
            let mut scratch = MlpScratch::new();
            let mut loss_sum = T::zero();
            let breakdown = evaluate(
                |x| {
                    let features = featurize(config.domain, x);
                    let v = net
                        .infer(params, &features, &mut scratch)
                        .map(|o| o[0])
                        .unwrap_or(T::nan());
                    match normalizer {
                        Some(n) => n.denormalize(v),
                        None => v,
                    }
                },
                eval_set,
            );
            for sample in eval_set {
                let features = featurize(config.domain, &sample.input);
                let v = net
                    .infer(params, &features, &mut scratch)
                    .map(|o| o[0])
                    .unwrap_or(T::nan());
                let u = match normalizer {
                    Some(n) => n.normalize(sample.target),
                    None => sample.target,
                };
                let l = match objective {
                    Objective::Mae => (v - u).abs(),
                    _ => (v - u) * (v - u),
                };
                loss_sum = loss_sum + l;
            }
            Ok(EvalRecord {
                step,
                error_a: breakdown.subtask_a,
                error_b: breakdown.subtask_b,
                error_combined: breakdown.combined,
                exact_error_combined: None,
                loss: loss_sum / real::<T>(eval_set.len() as f64),
            })
        }
        ModelKind::Arr(arr) => {
            let breakdown = evaluate(
                |x| {
                    let features = featurize(config.domain, x);
                    arr.approx_mean(&features, config.mean_samples, eval_rng)
                        .unwrap_or_else(|_| T::nan())
                },
                eval_set,
            );
            // The sampled mean is the reported protocol; the exact marginal
            // mean is recorded alongside whenever enumeration is feasible.
            let exact_error_combined = if arr.spec().bucket_count() <= MAX_ENUMERABLE_BUCKETS {
                let exact = evaluate(
                    |x| {
                        let features = featurize(config.domain, x);
                        arr.exact_mean(&features).unwrap_or_else(|_| T::nan())
                    },
                    eval_set,
                );
                Some(exact.combined)
            } else {
                None
            };
            let mut nll_sum = T::zero();
            for sample in eval_set {
                let features = featurize(config.domain, &sample.input);
                let code = arr.spec().encode(sample.target)?;
                nll_sum = nll_sum - arr.sequence_log_prob(&features, &code)?;
            }
            Ok(EvalRecord {
                step,
                error_a: breakdown.subtask_a,
                error_b: breakdown.subtask_b,
                error_combined: breakdown.combined,
                exact_error_combined,
                loss: nll_sum / real::<T>(eval_set.len() as f64),
            })
        }
    }
}

/// Trains an autoregressive run and hands back the trained model itself,
/// for inspection beyond the recorded metrics.
pub fn train_arr_model<T: Real>(
    config: &TrainConfig<T>,
) -> Result<ArrModel<T>, HarnessError> {
    if config.objective != Objective::Arr {
        return Err(config_err("train_arr_model requires objective = ARR"));
    }
    config.validate()?;
    let images = load_images_if_needed(config)?;
    let mut model = build_model(config, images.as_ref())?;
    let mut source = make_source(config, images.as_ref(), STREAM_TRAIN)?;
    let mut tape = Tape::new();
    let mut grads = match &model {
        ModelKind::Point { params, .. } => GradientSet::zeros_like(params),
        ModelKind::Arr(arr) => GradientSet::zeros_like(arr.params()),
    };
    for _ in 1..=config.gradient_steps() {
        let batch = source.batch(config.batch_size);
        match train_step(
            &mut model,
            config.objective,
            config.domain,
            &batch,
            config.lr,
            &mut tape,
            &mut grads,
        )? {
            StepOutcome::Loss(_) => {}
            StepOutcome::Diverged => break,
        }
    }
    match model {
        ModelKind::Arr(arr) => Ok(*arr),
        ModelKind::Point { .. } => unreachable!(),
    }
}

/// Runs one full training run to completion (or divergence).
pub fn train<T: Real>(config: &TrainConfig<T>) -> Result<RunMetrics<T>, HarnessError> {
    let images = load_images_if_needed(config)?;
    train_with_images(config, images.as_ref())
}

fn train_with_images<T: Real>(
    config: &TrainConfig<T>,
    images: Option<&Arc<MnistImages>>,
) -> Result<RunMetrics<T>, HarnessError> {
    config.validate()?;
    let start = Instant::now();

    let mut model = build_model(config, images)?;
    let mut train_source = make_source(config, images, STREAM_TRAIN)?;
    let eval_set = draw_eval_set(config, images)?;
    let mut eval_rng = ChaCha12Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(STREAM_EVAL_SAMPLING);

    let mut tape = Tape::new();
    let mut grads = match &model {
        ModelKind::Point { params, .. } => GradientSet::zeros_like(params),
        ModelKind::Arr(arr) => GradientSet::zeros_like(arr.params()),
    };

    let total_steps = config.gradient_steps();
    let mut records = Vec::new();
    let mut diverged_at = None;

    records.push(eval_model(&model, config.objective, config, &eval_set, &mut eval_rng, 0)?);
    for step in 1..=total_steps {
        let batch = train_source.batch(config.batch_size);
        match train_step(
            &mut model,
            config.objective,
            config.domain,
            &batch,
            config.lr,
            &mut tape,
            &mut grads,
        )? {
            StepOutcome::Loss(_) => {}
            StepOutcome::Diverged => {
                diverged_at = Some(step);
                break;
            }
        }
        if step % config.eval_interval == 0 || step == total_steps {
            records.push(eval_model(
                &model,
                config.objective,
                config,
                &eval_set,
                &mut eval_rng,
                step,
            )?);
        }
    }

    Ok(RunMetrics {
        objective: config.objective,
        lr: config.lr,
        magnitude: config.magnitude(),
        records,
        diverged_at,
        wall_clock: start.elapsed(),
    })
}

/// The paper's learning-rate grid: every half order of magnitude from
/// `10^1` down to `10^-6` (15 values, descending).
pub fn half_decade_grid<T: Real>() -> Vec<T> {
    lr_grid(1.0, -6.0, 0.5)
}

/// Descending grid of `10^e` for `e` from `exp_max` down to `exp_min` in
/// steps of `exp_step`.
pub fn lr_grid<T: Real>(exp_max: f64, exp_min: f64, exp_step: f64) -> Vec<T> {
    assert!(exp_step > 0.0 && exp_max >= exp_min);
    let count = ((exp_max - exp_min) / exp_step).round() as usize + 1;
    (0..count)
        .map(|i| real::<T>(10f64.powf(exp_max - i as f64 * exp_step)))
        .collect()
}

/// One cell of a learning-rate sweep.
#[derive(Debug, Clone)]
pub struct SweepCell<T> {
    pub objective: Objective,
    pub magnitude: i32,
    /// Index into the lr grid, for grid-step comparisons.
    pub lr_index: usize,
    pub lr: T,
    pub final_error: T,
    pub diverged: bool,
    pub is_argmin: bool,
    /// Single-threaded training time of this cell.
    pub wall_clock: Duration,
}

#[derive(Debug, Clone)]
pub struct SweepTable<T> {
    pub lrs: Vec<T>,
    pub cells: Vec<SweepCell<T>>,
}

impl<T: Real> SweepTable<T> {
    /// Grid index of the best learning rate for a `(objective, magnitude)`
    /// pair.
    pub fn argmin_lr_index(&self, objective: Objective, magnitude: i32) -> Option<usize> {
        self.cells
            .iter()
            .find(|c| c.objective == objective && c.magnitude == magnitude && c.is_argmin)
            .map(|c| c.lr_index)
    }
}

/// Trains one model per `(objective, lr, magnitude)` cell on the
/// single-target `sin_m` domain and records each cell's final error.
/// Diverged cells carry `+inf` so they order after every finished cell.
/// Cells run in parallel when the host has spare cores; results are merged
/// by index so the table does not depend on scheduling.
pub fn lr_sweep<T: Real>(
    base: &TrainConfig<T>,
    objectives: &[Objective],
    magnitudes: &[i32],
    lrs: &[T],
) -> Result<SweepTable<T>, HarnessError> {
    if objectives.is_empty() || magnitudes.is_empty() || lrs.is_empty() {
        return Err(config_err("sweep needs objectives, magnitudes, and lrs"));
    }
    let images = load_images_if_needed(base)?;

    let mut cell_configs = Vec::new();
    for &objective in objectives {
        for &magnitude in magnitudes {
            for (lr_index, &lr) in lrs.iter().enumerate() {
                let mut cfg = base.clone();
                cfg.objective = objective;
                cfg.subtask_a = SubtaskSpec::SinM { magnitude };
                cfg.subtask_b = None;
                cfg.lr = lr;
                cfg.validate()?;
                cell_configs.push((objective, magnitude, lr_index, cfg));
            }
        }
    }

    let results: Vec<Option<Result<RunMetrics<T>, HarnessError>>> =
        (0..cell_configs.len()).map(|_| None).collect();
    let results = Mutex::new(results);
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cell_configs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cell_configs.len() {
                    break;
                }
                let outcome = train_with_images(&cell_configs[idx].3, images.as_ref());
                results.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });

    let mut cells = Vec::with_capacity(cell_configs.len());
    for ((objective, magnitude, lr_index, _), outcome) in
        cell_configs.iter().zip(results.into_inner().unwrap())
    {
        let metrics = outcome.expect("worker filled every slot")?;
        let final_error = metrics.final_error();
        cells.push(SweepCell {
            objective: *objective,
            magnitude: *magnitude,
            lr_index: *lr_index,
            lr: lrs[*lr_index],
            final_error,
            diverged: metrics.diverged_at.is_some() || !final_error.is_finite(),
            is_argmin: false,
            wall_clock: metrics.wall_clock,
        });
    }

    // Mark the argmin cell per (objective, magnitude); ties break toward
    // the larger learning rate (earlier grid index), deterministically.
    for &objective in objectives {
        for &magnitude in magnitudes {
            let best = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.objective == objective && c.magnitude == magnitude)
                .min_by(|(_, x), (_, y)| {
                    x.final_error
                        .partial_cmp(&y.final_error)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i);
            if let Some(i) = best {
                cells[i].is_argmin = true;
            }
        }
    }

    Ok(SweepTable { lrs: lrs.to_vec(), cells })
}

/// Analytic memory accounting for one output-head configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRow {
    pub base: u64,
    pub steps: u32,
    /// `b^s`; `None` when it overflows 128-bit arithmetic.
    pub buckets: Option<u128>,
    /// Explicit-histogram head bytes `d_h * k * bytes`; `None` on overflow.
    pub explicit_bytes: Option<u128>,
    /// Autoregressive head bytes
    /// `(d_h + 2 d_e) * b * bytes + (b + s) * d_e * bytes`.
    pub arr_bytes: u128,
    pub explicit_oom: bool,
    pub arr_oom: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryReportConfig {
    /// Final hidden width feeding the output head.
    pub hidden_dim: u64,
    /// Embedding width of the autoregressive head.
    pub embed_dim: u64,
    pub bytes_per_param: u64,
    /// Budget above which a head is flagged out-of-memory.
    pub budget_bytes: u128,
}

impl Default for MemoryReportConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 4096,
            embed_dim: 64,
            bytes_per_param: 4,
            budget_bytes: 48_000_000_000,
        }
    }
}

/// Byte accounting of explicit vs autoregressive output heads for each
/// `(b, s)`. Overflowing bucket counts become OOM rows rather than errors.
pub fn memory_report(cfg: &MemoryReportConfig, shapes: &[(u64, u32)]) -> Vec<MemoryRow> {
    shapes
        .iter()
        .map(|&(base, steps)| {
            let buckets = (base as u128).checked_pow(steps);
            let explicit_bytes = buckets.and_then(|k| {
                k.checked_mul(cfg.hidden_dim as u128)?
                    .checked_mul(cfg.bytes_per_param as u128)
            });
            let d_h = cfg.hidden_dim as u128;
            let d_e = cfg.embed_dim as u128;
            let b = base as u128;
            let s = steps as u128;
            let bytes = cfg.bytes_per_param as u128;
            let arr_bytes = (d_h + 2 * d_e) * b * bytes + (b + s) * d_e * bytes;
            MemoryRow {
                base,
                steps,
                buckets,
                explicit_bytes,
                explicit_oom: explicit_bytes.is_none_or(|e| e > cfg.budget_bytes),
                arr_oom: arr_bytes > cfg.budget_bytes,
                arr_bytes,
            }
        })
        .collect()
}

fn fmt_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_real<T: Real>(v: T) -> String {
    format!("{v:?}")
}

/// Metrics CSV: `step,subtask,objective,lr,magnitude,metric,value`.
pub fn write_metrics_csv<T: Real>(
    out: &mut impl Write,
    metrics: &RunMetrics<T>,
) -> io::Result<()> {
    writeln!(out, "step,subtask,objective,lr,magnitude,metric,value")?;
    let ctx = format!(
        "{},{},{}",
        metrics.objective,
        fmt_real(metrics.lr),
        fmt_opt(&metrics.magnitude)
    );
    for r in &metrics.records {
        if let Some(e) = r.error_a {
            writeln!(out, "{},A,{ctx},mse,{}", r.step, fmt_real(e))?;
        }
        if let Some(e) = r.error_b {
            writeln!(out, "{},B,{ctx},mse,{}", r.step, fmt_real(e))?;
        }
        writeln!(out, "{},combined,{ctx},mse,{}", r.step, fmt_real(r.error_combined))?;
        if let Some(e) = r.exact_error_combined {
            writeln!(out, "{},combined,{ctx},mse_exact,{}", r.step, fmt_real(e))?;
        }
        writeln!(out, "{},combined,{ctx},loss,{}", r.step, fmt_real(r.loss))?;
    }
    if let Some(step) = metrics.diverged_at {
        writeln!(out, "{step},combined,{ctx},diverged,1")?;
    }
    Ok(())
}

/// Sweep summary CSV: `objective,magnitude,lr,final_error,diverged`.
pub fn write_sweep_csv<T: Real>(out: &mut impl Write, table: &SweepTable<T>) -> io::Result<()> {
    writeln!(out, "objective,magnitude,lr,final_error,diverged")?;
    for c in &table.cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.objective,
            c.magnitude,
            fmt_real(c.lr),
            fmt_real(c.final_error),
            c.diverged
        )?;
    }
    Ok(())
}

/// Memory report CSV: `b,s,k,explicit_bytes,arr_bytes,oom_flag`.
pub fn write_memory_csv(out: &mut impl Write, rows: &[MemoryRow]) -> io::Result<()> {
    writeln!(out, "b,s,k,explicit_bytes,arr_bytes,oom_flag")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.base,
            r.steps,
            fmt_opt(&r.buckets),
            fmt_opt(&r.explicit_bytes),
            r.arr_bytes,
            r.explicit_oom
        )?;
    }
    Ok(())
}
