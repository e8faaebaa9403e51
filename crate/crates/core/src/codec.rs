//! Target codec: real values to histogram buckets to base-b digit codes and back.
//!
//! A [`BucketSpec`] partitions a half-open target range `[y_min, y_max)` into
//! `k = b^s` uniform buckets. A target maps to the bucket containing it, the
//! bucket index expands into an `s`-digit base-`b` code (most-significant
//! digit first, so the first predicted digit carries the coarsest scale
//! information), and a sampled bucket maps back to a real value through its
//! midpoint. [`Normalizer`] provides the usual zero-mean unit-variance affine
//! transform for the normalized-MSE baseline.
//!
//! Everything here is a pure function of its inputs.

use std::fmt;

use crate::num::{real, real_from_u128, Real};

/// Largest bucket count for which an explicit histogram vector may be
/// materialized. Beyond this the digit path must be used; see
/// [`BucketSpec::one_hot_histogram`].
pub const MAX_MATERIALIZED_BUCKETS: u128 = 1 << 24;

/// Errors from codec operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    /// Target or bound is NaN/infinite.
    NonFinite { what: &'static str },
    /// `y_min >= y_max`.
    EmptyRange,
    /// Base must be at least 2.
    BaseTooSmall { base: u32 },
    /// Sequence length must be at least 1.
    NoSteps,
    /// `b^s` does not fit in 128-bit integer arithmetic.
    BucketCountOverflow { base: u32, steps: u32 },
    /// Bucket index outside `[0, k)`.
    IndexOutOfRange { index: u128, buckets: u128 },
    /// A digit outside `[0, b)`.
    DigitOutOfRange { digit: u32, base: u32 },
    /// Digit sequence length differs from `s`.
    WrongDigitCount { got: usize, expected: usize },
    /// Bucket count too large to materialize as an explicit vector.
    TooManyBuckets { buckets: u128, limit: u128 },
    /// Fewer than two training targets.
    TooFewTargets { got: usize },
    /// Zero-variance training targets.
    DegenerateTargets,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite { what } => write!(f, "{what} must be finite"),
            Self::EmptyRange => write!(f, "target range is empty: y_min must be < y_max"),
            Self::BaseTooSmall { base } => write!(f, "base must be >= 2, got {base}"),
            Self::NoSteps => write!(f, "sequence length must be >= 1"),
            Self::BucketCountOverflow { base, steps } => {
                write!(f, "bucket count {base}^{steps} overflows 128-bit arithmetic")
            }
            Self::IndexOutOfRange { index, buckets } => {
                write!(f, "bucket index {index} out of range [0, {buckets})")
            }
            Self::DigitOutOfRange { digit, base } => {
                write!(f, "digit {digit} out of range [0, {base})")
            }
            Self::WrongDigitCount { got, expected } => {
                write!(f, "expected {expected} digits, got {got}")
            }
            Self::TooManyBuckets { buckets, limit } => {
                write!(
                    f,
                    "cannot materialize {buckets} buckets explicitly (limit {limit}); \
                     use the digit path"
                )
            }
            Self::TooFewTargets { got } => {
                write!(f, "need at least 2 targets to fit a normalizer, got {got}")
            }
            Self::DegenerateTargets => {
                write!(f, "training targets have zero variance")
            }
        }
    }
}

impl std::error::Error for CodecError {}

/// An `s`-digit base-`b` code together with the flat bucket index it encodes.
///
/// Digits are stored most-significant first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitCode {
    digits: Vec<u32>,
    index: u128,
}

impl DigitCode {
    /// The digit sequence, most-significant first.
    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    /// The flat bucket index in `[0, k)`.
    pub fn index(&self) -> u128 {
        self.index
    }

    /// Number of digits (the spec's `s`).
    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }
}

/// Uniform histogram discretization of a half-open target range.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketSpec<T> {
    y_min: T,
    y_max: T,
    base: u32,
    steps: u32,
    buckets: u128,
    width: T,
}

impl<T: Real> BucketSpec<T> {
    /// Builds a spec over `[y_min, y_max)` with `b^s` buckets.
    ///
    /// `b^s` is computed exactly in integer arithmetic; construction fails
    /// if it overflows `u128`.
    pub fn new(y_min: T, y_max: T, base: u32, steps: u32) -> Result<Self, CodecError> {
        if !y_min.is_finite() {
            return Err(CodecError::NonFinite { what: "y_min" });
        }
        if !y_max.is_finite() {
            return Err(CodecError::NonFinite { what: "y_max" });
        }
        if y_min >= y_max {
            return Err(CodecError::EmptyRange);
        }
        if base < 2 {
            return Err(CodecError::BaseTooSmall { base });
        }
        if steps < 1 {
            return Err(CodecError::NoSteps);
        }
        let buckets = (base as u128)
            .checked_pow(steps)
            .ok_or(CodecError::BucketCountOverflow { base, steps })?;
        let width = (y_max - y_min) / real_from_u128::<T>(buckets);
        if !(width > T::zero()) {
            // k so large the width underflows to zero; unusable as a codec.
            return Err(CodecError::BucketCountOverflow { base, steps });
        }
        Ok(Self {
            y_min,
            y_max,
            base,
            steps,
            buckets,
            width,
        })
    }

    pub fn y_min(&self) -> T {
        self.y_min
    }

    pub fn y_max(&self) -> T {
        self.y_max
    }

    /// Token alphabet size `b`.
    pub fn base(&self) -> u32 {
        self.base
    }

    /// Sequence length `s`.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Bucket count `k = b^s`.
    pub fn bucket_count(&self) -> u128 {
        self.buckets
    }

    /// Bucket width `w = (y_max - y_min) / k`.
    pub fn width(&self) -> T {
        self.width
    }

    /// Maps a finite target to the index of the bucket containing it.
    ///
    /// Out-of-range targets clamp to the nearest edge bucket, so
    /// evaluation-time extrapolation never aborts a run.
    pub fn bucket_index(&self, y: T) -> Result<u128, CodecError> {
        if !y.is_finite() {
            return Err(CodecError::NonFinite { what: "target" });
        }
        let t = (y - self.y_min) / (self.y_max - self.y_min);
        if t <= T::zero() {
            return Ok(0);
        }
        if t >= T::one() {
            return Ok(self.buckets - 1);
        }
        let scaled = (t * real_from_u128::<T>(self.buckets)).floor();
        let index = scaled.to_u128().unwrap_or(0).min(self.buckets - 1);
        Ok(index)
    }

    /// Expands a bucket index into its base-`b` digits, most-significant first.
    pub fn digits_of_index(&self, index: u128) -> Result<DigitCode, CodecError> {
        if index >= self.buckets {
            return Err(CodecError::IndexOutOfRange {
                index,
                buckets: self.buckets,
            });
        }
        let base = self.base as u128;
        let mut digits = vec![0u32; self.steps as usize];
        let mut rest = index;
        for slot in digits.iter_mut().rev() {
            *slot = (rest % base) as u32;
            rest /= base;
        }
        Ok(DigitCode { digits, index })
    }

    /// Exact inverse of [`BucketSpec::digits_of_index`].
    pub fn index_of_digits(&self, digits: &[u32]) -> Result<u128, CodecError> {
        if digits.len() != self.steps as usize {
            return Err(CodecError::WrongDigitCount {
                got: digits.len(),
                expected: self.steps as usize,
            });
        }
        let base = self.base as u128;
        let mut index = 0u128;
        for &digit in digits {
            if digit >= self.base {
                return Err(CodecError::DigitOutOfRange {
                    digit,
                    base: self.base,
                });
            }
            index = index * base + digit as u128;
        }
        Ok(index)
    }

    /// Builds a code from raw digits, validating them against this spec.
    pub fn code_from_digits(&self, digits: &[u32]) -> Result<DigitCode, CodecError> {
        let index = self.index_of_digits(digits)?;
        Ok(DigitCode {
            digits: digits.to_vec(),
            index,
        })
    }

    /// Encodes a target straight to its digit code.
    pub fn encode(&self, y: T) -> Result<DigitCode, CodecError> {
        let index = self.bucket_index(y)?;
        self.digits_of_index(index)
    }

    /// The representative real value of a bucket: its midpoint
    /// `y_min + (a + 0.5) * w`.
    pub fn bucket_midpoint(&self, index: u128) -> Result<T, CodecError> {
        if index >= self.buckets {
            return Err(CodecError::IndexOutOfRange {
                index,
                buckets: self.buckets,
            });
        }
        Ok(self.y_min + (real_from_u128::<T>(index) + real::<T>(0.5)) * self.width)
    }

    /// Explicit one-hot histogram over all `k` buckets.
    ///
    /// Fails with a capacity error when `k` exceeds
    /// [`MAX_MATERIALIZED_BUCKETS`]: the vector this would allocate is
    /// exactly what the digit decomposition exists to avoid.
    pub fn one_hot_histogram(&self, y: T) -> Result<Vec<T>, CodecError> {
        if self.buckets > MAX_MATERIALIZED_BUCKETS {
            return Err(CodecError::TooManyBuckets {
                buckets: self.buckets,
                limit: MAX_MATERIALIZED_BUCKETS,
            });
        }
        let index = self.bucket_index(y)? as usize;
        let mut hist = vec![T::zero(); self.buckets as usize];
        hist[index] = T::one();
        Ok(hist)
    }
}

/// Affine target transform to zero mean and unit standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer<T> {
    mean: T,
    std: T,
}

impl<T: Real> Normalizer<T> {
    /// Fits mean and population standard deviation to the given targets.
    pub fn fit(targets: &[T]) -> Result<Self, CodecError> {
        if targets.len() < 2 {
            return Err(CodecError::TooFewTargets { got: targets.len() });
        }
        for &y in targets {
            if !y.is_finite() {
                return Err(CodecError::NonFinite { what: "target" });
            }
        }
        let n = real::<T>(targets.len() as f64);
        let mean = targets.iter().fold(T::zero(), |acc, &y| acc + y) / n;
        let var = targets
            .iter()
            .fold(T::zero(), |acc, &y| acc + (y - mean) * (y - mean))
            / n;
        let std = var.sqrt();
        if !(std > T::zero()) {
            return Err(CodecError::DegenerateTargets);
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn std(&self) -> T {
        self.std
    }

    /// `(y - mean) / std`.
    pub fn normalize(&self, y: T) -> T {
        (y - self.mean) / self.std
    }

    /// Inverse transform: `y' * std + mean`.
    pub fn denormalize(&self, y_prime: T) -> T {
        y_prime * self.std + self.mean
    }
}

/// Convenience constructor used by `fit` call sites that already validated.
pub fn fit_normalizer<T: Real>(targets: &[T]) -> Result<Normalizer<T>, CodecError> {
    Normalizer::fit(targets)
}
