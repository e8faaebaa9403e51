//! Data generation: the toy 1-D multi-scale target mixtures and the MNIST
//! composite-digit regression domain.
//!
//! Every target function is an affine map of one of two base shapes,
//! `sin(2πx) + 1` or `ln(x + 0.4) + 1`, which is what lets the generators
//! report exact means, variances, and ranges for test oracles and bucket
//! ranges.
//!
//! A mixture draws one of two subtasks per sample with equal probability
//! and encodes the chosen subtask into the input itself: toy inputs are
//! negated for the sin subtask; MNIST pixels are sign-flipped (after
//! normalization) for the sin subtask. The tag is therefore always
//! recoverable from the input and the mixed task stays well-posed.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::num::{real, Real};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_SIDE: usize = 28;
const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;

/// Side length of the composite input (a 2x2 grid of digits).
pub const COMPOSITE_SIDE: usize = 2 * MNIST_SIDE;
/// Flattened composite input dimension.
pub const COMPOSITE_PIXELS: usize = COMPOSITE_SIDE * COMPOSITE_SIDE;

#[derive(Debug)]
pub enum DataError {
    /// Toy input outside the open interval (0, 1).
    InputOutOfRange { x: f64 },
    /// Magnitude parameter given for a function that forbids it, or missing
    /// for `sin_m`.
    BadSubtaskName { name: String },
    /// Two subtasks whose input encodings collide (both sin or both log).
    AmbiguousEncoding,
    Io { path: PathBuf, error: std::io::Error },
    /// Malformed IDX container.
    IdxFormat {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    /// Image and label files disagree on the sample count.
    CountMismatch { images: usize, labels: usize },
    /// A label byte outside 0..=9.
    BadLabel { offset: u64, label: u8 },
    /// The sampler needs at least one image of every digit class.
    MissingDigitClass { digit: u8 },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InputOutOfRange { x } => {
                write!(f, "toy input {x} outside the open interval (0, 1)")
            }
            Self::BadSubtaskName { name } => write!(f, "unknown subtask `{name}`"),
            Self::AmbiguousEncoding => write!(
                f,
                "subtask pair must mix one sin and one log function so the \
                 input encodes the subtask"
            ),
            Self::Io { path, error } => write!(f, "{}: {error}", path.display()),
            Self::IdxFormat { path, offset, message } => {
                write!(f, "{} at byte {offset}: {message}", path.display())
            }
            Self::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            Self::BadLabel { offset, label } => {
                write!(f, "label {label} at byte {offset} outside 0..=9")
            }
            Self::MissingDigitClass { digit } => {
                write!(f, "no image of digit {digit} in the dataset")
            }
        }
    }
}

impl std::error::Error for DataError {}

/// Which of the two mixture slots a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubtaskTag {
    A,
    B,
}

/// One of the target generator functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubtaskSpec {
    /// `sin(2πx) + 1`
    SinS,
    /// `3·10⁶ (sin(2πx) + 1) + 5·10⁶`
    SinL,
    /// `2 (ln(x + 0.4) + 1)`
    LogS,
    /// `5·10⁶ (ln(x + 0.4) + 1) + 5·10⁶`
    LogL,
    /// `3·10^m (sin(2πx) + 1) + 5·10^m` — the scale-sweep family.
    SinM { magnitude: i32 },
}

enum BaseShape {
    /// `sin(2πx) + 1`, range [0, 2], mean 1, variance 1/2.
    Sin,
    /// `ln(x + 0.4) + 1`, monotone on (0, 1).
    Log,
}

impl BaseShape {
    fn eval<T: Real>(&self, x: T) -> T {
        match self {
            Self::Sin => ((T::one() + T::one()) * T::PI() * x).sin() + T::one(),
            Self::Log => (x + real::<T>(0.4)).ln() + T::one(),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Self::Sin => 1.0,
            // ∫₀¹ ln(x + .4) dx + 1 computed in closed form.
            Self::Log => log_integral_1() + 1.0,
        }
    }

    fn variance(&self) -> f64 {
        match self {
            Self::Sin => 0.5,
            Self::Log => {
                let i1 = log_integral_1();
                log_integral_2() - i1 * i1
            }
        }
    }

    fn range(&self) -> (f64, f64) {
        match self {
            Self::Sin => (0.0, 2.0),
            Self::Log => (0.4f64.ln() + 1.0, 1.4f64.ln() + 1.0),
        }
    }
}

/// `∫₀¹ ln(x + 0.4) dx`
fn log_integral_1() -> f64 {
    1.4 * 1.4f64.ln() - 0.4 * 0.4f64.ln() - 1.0
}

/// `∫₀¹ ln²(x + 0.4) dx`
fn log_integral_2() -> f64 {
    let part = |u: f64| u * (u.ln() * u.ln() - 2.0 * u.ln() + 2.0);
    part(1.4) - part(0.4)
}

impl SubtaskSpec {
    fn decompose(&self) -> (f64, f64, BaseShape) {
        match *self {
            Self::SinS => (1.0, 0.0, BaseShape::Sin),
            Self::SinL => (3e6, 5e6, BaseShape::Sin),
            Self::LogS => (2.0, 0.0, BaseShape::Log),
            Self::LogL => (5e6, 5e6, BaseShape::Log),
            Self::SinM { magnitude } => {
                let scale = 10f64.powi(magnitude);
                (3.0 * scale, 5.0 * scale, BaseShape::Sin)
            }
        }
    }

    /// True for the sin family, which is what the input encoding keys on.
    pub fn is_sin(&self) -> bool {
        matches!(self.decompose().2, BaseShape::Sin)
    }

    /// The raw target formula, defined for any finite `x`. The toy domain
    /// restricts `x` to (0, 1) — see [`toy_target`] — while the MNIST
    /// composite value lives in [0, 1) and uses this directly.
    pub fn transform<T: Real>(&self, x: T) -> T {
        let (scale, offset, base) = self.decompose();
        real::<T>(scale) * base.eval(x) + real::<T>(offset)
    }

    /// Exact mean of the target under `x ~ Uniform(0, 1)`.
    pub fn mean(&self) -> f64 {
        let (scale, offset, base) = self.decompose();
        scale * base.mean() + offset
    }

    /// Exact variance of the target under `x ~ Uniform(0, 1)`.
    pub fn variance(&self) -> f64 {
        let (scale, _, base) = self.decompose();
        scale * scale * base.variance()
    }

    /// Analytic `[min, max]` of the target over x in (0, 1).
    pub fn target_range(&self) -> (f64, f64) {
        let (scale, offset, base) = self.decompose();
        let (lo, hi) = base.range();
        (scale * lo + offset, scale * hi + offset)
    }
}

impl fmt::Display for SubtaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SinS => write!(f, "sin_s"),
            Self::SinL => write!(f, "sin_l"),
            Self::LogS => write!(f, "log_s"),
            Self::LogL => write!(f, "log_l"),
            Self::SinM { magnitude } => write!(f, "sin_m:{magnitude}"),
        }
    }
}

impl FromStr for SubtaskSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "sin_s" => Ok(Self::SinS),
            "sin_l" => Ok(Self::SinL),
            "log_s" => Ok(Self::LogS),
            "log_l" => Ok(Self::LogL),
            _ => {
                if let Some(m) = s.strip_prefix("sin_m:") {
                    if let Ok(magnitude) = m.parse::<i32>() {
                        if magnitude.abs() <= 300 {
                            return Ok(Self::SinM { magnitude });
                        }
                    }
                }
                Err(DataError::BadSubtaskName { name: s.to_string() })
            }
        }
    }
}

/// Evaluates a subtask function on a toy-domain input, enforcing the open
/// interval (0, 1).
pub fn toy_target<T: Real>(spec: &SubtaskSpec, x: T) -> Result<T, DataError> {
    let xf = x.to_f64().unwrap_or(f64::NAN);
    if !(xf > 0.0 && xf < 1.0) {
        return Err(DataError::InputOutOfRange { x: xf });
    }
    Ok(spec.transform(x))
}

/// One training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: Vec<T>,
    pub target: T,
    pub subtask: SubtaskTag,
}

impl<T> Sample<T> {
    /// The generator function this sample was drawn from.
    pub fn spec(&self, a: &SubtaskSpec, b: Option<&SubtaskSpec>) -> SubtaskSpec {
        match self.subtask {
            SubtaskTag::A => *a,
            SubtaskTag::B => *b.expect("sample tagged B from a single-subtask source"),
        }
    }
}

/// Where a batch's randomness came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchProvenance {
    pub seed: u64,
    pub stream: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub samples: Vec<Sample<T>>,
    pub provenance: BatchProvenance,
}

fn open_unit<T: Real>(rng: &mut impl Rng) -> T {
    // Uniform on the open interval (0, 1): reject the measure-zero 0.0.
    loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            return real::<T>(v);
        }
    }
}

fn pick_subtask(rng: &mut impl Rng, has_b: bool) -> SubtaskTag {
    if has_b && rng.random::<f64>() < 0.5 {
        SubtaskTag::B
    } else {
        SubtaskTag::A
    }
}

/// Streaming sampler for the toy 1-D domain.
///
/// Inputs are `x ~ Uniform(0, 1)`, negated when the drawn subtask is a sin
/// function. A two-subtask mixture must pair one sin with one log function;
/// otherwise the sign encoding would be ambiguous.
#[derive(Debug)]
pub struct ToySampler<T> {
    subtask_a: SubtaskSpec,
    subtask_b: Option<SubtaskSpec>,
    rng: ChaCha12Rng,
    seed: u64,
    stream: u64,
    drawn: u64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> ToySampler<T> {
    pub fn new(
        subtask_a: SubtaskSpec,
        subtask_b: Option<SubtaskSpec>,
        seed: u64,
        stream: u64,
    ) -> Result<Self, DataError> {
        if let Some(b) = &subtask_b {
            if b.is_sin() == subtask_a.is_sin() {
                return Err(DataError::AmbiguousEncoding);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            subtask_a,
            subtask_b,
            rng,
            seed,
            stream,
            drawn: 0,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn batch(&mut self, n: usize) -> Batch<T> {
        let provenance = BatchProvenance {
            seed: self.seed,
            stream: self.stream,
            index: self.drawn,
        };
        self.drawn += 1;
        let samples = (0..n)
            .map(|_| {
                let tag = pick_subtask(&mut self.rng, self.subtask_b.is_some());
                let spec = match tag {
                    SubtaskTag::A => self.subtask_a,
                    SubtaskTag::B => self.subtask_b.unwrap(),
                };
                let x: T = open_unit(&mut self.rng);
                let input = if spec.is_sin() { -x } else { x };
                Sample {
                    input: vec![input],
                    target: spec.transform(x),
                    subtask: tag,
                }
            })
            .collect();
        Batch { samples, provenance }
    }
}

/// A loaded MNIST image set with the pixel statistics used for
/// normalization.
#[derive(Debug)]
pub struct MnistImages {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pixel_mean: f64,
    pixel_std: f64,
}

impl MnistImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * MNIST_PIXELS..(i + 1) * MNIST_PIXELS]
    }

    pub fn pixel_mean(&self) -> f64 {
        self.pixel_mean
    }

    pub fn pixel_std(&self) -> f64 {
        self.pixel_std
    }

    fn has_all_digit_classes(&self) -> Result<(), DataError> {
        let mut seen = [false; 10];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        match seen.iter().position(|&s| !s) {
            Some(digit) => Err(DataError::MissingDigitClass { digit: digit as u8 }),
            None => Ok(()),
        }
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    data: Vec<u8>,
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self, DataError> {
        let mut data = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|error| DataError::Io {
                path: path.to_path_buf(),
                error,
            })?;
        Ok(Self { path, data, offset: 0 })
    }

    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::IdxFormat {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32, DataError> {
        if self.offset + 4 > self.data.len() {
            return Err(self.err("truncated header"));
        }
        let bytes: [u8; 4] = self.data[self.offset..self.offset + 4].try_into().unwrap();
        self.offset += 4;
        Ok(u32::from_be_bytes(bytes))
    }

    fn read_bytes(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.offset + n > self.data.len() {
            return Err(self.err(format!(
                "truncated body: expected {n} more bytes, found {}",
                self.data.len() - self.offset
            )));
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn expect_end(&self) -> Result<(), DataError> {
        if self.offset != self.data.len() {
            return Err(self.err(format!(
                "{} trailing bytes after the declared payload",
                self.data.len() - self.offset
            )));
        }
        Ok(())
    }
}

/// Loads an MNIST-style IDX image/label pair (big-endian, magic
/// `0x00000803` / `0x00000801`).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistImages, DataError> {
    let mut images = IdxReader::open(images_path)?;
    let magic = images.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::IdxFormat {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = images.read_u32()? as usize;
    let rows = images.read_u32()? as usize;
    let cols = images.read_u32()? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(images.err(format!("expected 28x28 images, got {rows}x{cols}")));
    }
    let pixels = images.read_bytes(count * MNIST_PIXELS)?.to_vec();
    images.expect_end()?;

    let mut labels_reader = IdxReader::open(labels_path)?;
    let magic = labels_reader.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::IdxFormat {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let label_count = labels_reader.read_u32()? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let label_offset = labels_reader.offset as u64;
    let labels = labels_reader.read_bytes(label_count)?.to_vec();
    labels_reader.expect_end()?;
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(DataError::BadLabel {
            offset: label_offset + pos as u64,
            label: labels[pos],
        });
    }

    let n = pixels.len().max(1) as f64;
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&p| {
            let d = p as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    // Guard against degenerate fixtures; a constant image set still loads.
    let std = var.sqrt().max(1e-12);

    Ok(MnistImages {
        pixels,
        labels,
        pixel_mean: mean,
        pixel_std: std,
    })
}

/// Concatenates four uniformly sampled digits into a 2x2 grid and reads the
/// four labels off as a decimal in [0, 1): `(1000 d1 + 100 d2 + 10 d3 + d4)
/// / 10000`. Pixels are normalized by the dataset mean/std.
pub fn mnist_composite<T: Real>(
    images: &MnistImages,
    rng: &mut impl Rng,
) -> (Vec<T>, T) {
    let picks: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..images.len()));
    let mut input = vec![T::zero(); COMPOSITE_PIXELS];
    let mean = real::<T>(images.pixel_mean());
    let std = real::<T>(images.pixel_std());
    for (slot, &img_idx) in picks.iter().enumerate() {
        let (grid_row, grid_col) = (slot / 2, slot % 2);
        let img = images.image(img_idx);
        for r in 0..MNIST_SIDE {
            let dest_row = grid_row * MNIST_SIDE + r;
            let dest = dest_row * COMPOSITE_SIDE + grid_col * MNIST_SIDE;
            for c in 0..MNIST_SIDE {
                input[dest + c] = (real::<T>(img[r * MNIST_SIDE + c] as f64) - mean) / std;
            }
        }
    }
    let value = compose_value(
        images.label(picks[0]),
        images.label(picks[1]),
        images.label(picks[2]),
        images.label(picks[3]),
    );
    (input, value)
}

/// The decimal read off a 2x2 digit grid.
pub fn compose_value<T: Real>(d1: u8, d2: u8, d3: u8, d4: u8) -> T {
    let numerator = 1000 * d1 as u32 + 100 * d2 as u32 + 10 * d3 as u32 + d4 as u32;
    real::<T>(numerator as f64) / real::<T>(10_000.0)
}

/// Streaming sampler for the MNIST composite domain: the composite value is
/// fed through the drawn subtask's function, and sin-subtask inputs are
/// inverted (`v -> -v` post-normalization).
#[derive(Debug)]
pub struct MnistSampler<T> {
    images: Arc<MnistImages>,
    subtask_a: SubtaskSpec,
    subtask_b: Option<SubtaskSpec>,
    rng: ChaCha12Rng,
    seed: u64,
    stream: u64,
    drawn: u64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> MnistSampler<T> {
    pub fn new(
        images: Arc<MnistImages>,
        subtask_a: SubtaskSpec,
        subtask_b: Option<SubtaskSpec>,
        seed: u64,
        stream: u64,
    ) -> Result<Self, DataError> {
        if let Some(b) = &subtask_b {
            if b.is_sin() == subtask_a.is_sin() {
                return Err(DataError::AmbiguousEncoding);
            }
        }
        images.has_all_digit_classes()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            images,
            subtask_a,
            subtask_b,
            rng,
            seed,
            stream,
            drawn: 0,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn batch(&mut self, n: usize) -> Batch<T> {
        let provenance = BatchProvenance {
            seed: self.seed,
            stream: self.stream,
            index: self.drawn,
        };
        self.drawn += 1;
        let samples = (0..n)
            .map(|_| {
                let tag = pick_subtask(&mut self.rng, self.subtask_b.is_some());
                let spec = match tag {
                    SubtaskTag::A => self.subtask_a,
                    SubtaskTag::B => self.subtask_b.unwrap(),
                };
                let (mut input, value) = mnist_composite::<T>(&self.images, &mut self.rng);
                if spec.is_sin() {
                    for v in &mut input {
                        *v = -*v;
                    }
                }
                Sample {
                    input,
                    target: spec.transform(value),
                    subtask: tag,
                }
            })
            .collect();
        Batch { samples, provenance }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn toy_target_spot_values() {
        approx(toy_target(&SubtaskSpec::SinS, 0.25).unwrap(), 2.0, 1e-12);
        approx(toy_target(&SubtaskSpec::SinL, 0.25).unwrap(), 1.1e7, 1e-3);
        approx(toy_target(&SubtaskSpec::LogS, 0.6).unwrap(), 2.0, 1e-12);
        // sin_m at m = 6 coincides with sin_l.
        let m6 = SubtaskSpec::SinM { magnitude: 6 };
        approx(
            toy_target(&m6, 0.37).unwrap(),
            toy_target(&SubtaskSpec::SinL, 0.37).unwrap(),
            1e-3,
        );
    }

    #[test]
    fn toy_target_rejects_the_closed_endpoints() {
        assert!(matches!(
            toy_target(&SubtaskSpec::SinS, 0.0).unwrap_err(),
            DataError::InputOutOfRange { .. }
        ));
        assert!(matches!(
            toy_target(&SubtaskSpec::LogS, 1.0).unwrap_err(),
            DataError::InputOutOfRange { .. }
        ));
        // The raw transform stays defined at 0 for the MNIST value path.
        approx(
            SubtaskSpec::LogS.transform(0.0),
            2.0 * (0.4f64.ln() + 1.0),
            1e-12,
        );
    }

    #[test]
    fn analytic_means_match_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        for spec in [
            SubtaskSpec::SinS,
            SubtaskSpec::SinL,
            SubtaskSpec::LogS,
            SubtaskSpec::LogL,
            SubtaskSpec::SinM { magnitude: 2 },
        ] {
            let n = 200_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let y = spec.transform::<f64>(open_unit(&mut rng));
                sum += y;
                sum_sq += y * y;
            }
            let mc_mean = sum / n as f64;
            let mc_var = sum_sq / n as f64 - mc_mean * mc_mean;
            let sigma = (spec.variance() / n as f64).sqrt();
            approx(mc_mean, spec.mean(), 5.0 * sigma);
            approx(mc_var, spec.variance(), 0.02 * spec.variance());
        }
    }

    #[test]
    fn figure_caption_means() {
        approx(SubtaskSpec::LogS.mean(), 1.67, 0.02);
        approx(SubtaskSpec::SinL.mean(), 8e6, 0.0);
        approx(SubtaskSpec::LogL.mean(), 9e6, 0.03 * 9e6);
    }

    #[test]
    fn target_ranges_bound_sampled_targets() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        for spec in [SubtaskSpec::SinS, SubtaskSpec::SinL, SubtaskSpec::LogS, SubtaskSpec::LogL] {
            let (lo, hi) = spec.target_range();
            for _ in 0..50_000 {
                let y = spec.transform::<f64>(open_unit(&mut rng));
                assert!(y >= lo - 1e-9 && y <= hi + 1e-9, "{spec}: {y} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn subtask_names_roundtrip() {
        for spec in [
            SubtaskSpec::SinS,
            SubtaskSpec::SinL,
            SubtaskSpec::LogS,
            SubtaskSpec::LogL,
            SubtaskSpec::SinM { magnitude: -3 },
        ] {
            assert_eq!(spec.to_string().parse::<SubtaskSpec>().unwrap(), spec);
        }
        assert!("sin_x".parse::<SubtaskSpec>().is_err());
        assert!("sin_m:".parse::<SubtaskSpec>().is_err());
        assert!("sin_m:9000".parse::<SubtaskSpec>().is_err());
    }

    #[test]
    fn toy_sampler_encodes_subtask_in_the_sign() {
        let mut sampler =
            ToySampler::<f64>::new(SubtaskSpec::LogS, Some(SubtaskSpec::SinL), 3, 0).unwrap();
        let batch = sampler.batch(20_000);
        let mut a_count = 0usize;
        for s in &batch.samples {
            match s.subtask {
                SubtaskTag::A => {
                    assert!(s.input[0] > 0.0, "log inputs stay positive");
                    a_count += 1;
                }
                SubtaskTag::B => assert!(s.input[0] < 0.0, "sin inputs are negated"),
            }
        }
        let frac = a_count as f64 / batch.samples.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "subtask A fraction {frac}");
    }

    #[test]
    fn toy_sampler_rejects_ambiguous_pairs() {
        assert!(matches!(
            ToySampler::<f64>::new(SubtaskSpec::SinS, Some(SubtaskSpec::SinL), 0, 0).unwrap_err(),
            DataError::AmbiguousEncoding
        ));
    }

    #[test]
    fn toy_sampler_is_deterministic_and_tracks_provenance() {
        let mut a = ToySampler::<f64>::new(SubtaskSpec::LogS, Some(SubtaskSpec::SinL), 9, 2).unwrap();
        let mut b = ToySampler::<f64>::new(SubtaskSpec::LogS, Some(SubtaskSpec::SinL), 9, 2).unwrap();
        let (x, y) = (a.batch(100), b.batch(100));
        assert_eq!(x, y);
        assert_eq!(x.provenance, BatchProvenance { seed: 9, stream: 2, index: 0 });
        assert_eq!(a.batch(1).provenance.index, 1);
    }

    // -- IDX fixtures ------------------------------------------------------

    fn write_idx_images(path: &Path, images: &[[u8; MNIST_PIXELS]]) {
        let mut data = Vec::new();
        data.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        data.extend_from_slice(&(images.len() as u32).to_be_bytes());
        data.extend_from_slice(&28u32.to_be_bytes());
        data.extend_from_slice(&28u32.to_be_bytes());
        for img in images {
            data.extend_from_slice(img);
        }
        fs::write(path, data).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut data = Vec::new();
        data.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        data.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        data.extend_from_slice(labels);
        fs::write(path, data).unwrap();
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("scalereg-data-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    /// One flat-shaded image per digit 0..=9; digit d has every pixel 20*d.
    fn fixture_paths(prefix: &str) -> (PathBuf, PathBuf) {
        let images: Vec<[u8; MNIST_PIXELS]> =
            (0..10).map(|d| [(20 * d) as u8; MNIST_PIXELS]).collect();
        let labels: Vec<u8> = (0..10).collect();
        let img_path = tmp(&format!("{prefix}-images.idx"));
        let lbl_path = tmp(&format!("{prefix}-labels.idx"));
        write_idx_images(&img_path, &images);
        write_idx_labels(&lbl_path, &labels);
        (img_path, lbl_path)
    }

    #[test]
    fn idx_roundtrip_parses_pixels_and_labels() {
        let img_path = tmp("two-images.idx");
        let lbl_path = tmp("two-labels.idx");
        let mut first = [0u8; MNIST_PIXELS];
        first[0] = 17;
        first[783] = 255;
        let second = [9u8; MNIST_PIXELS];
        write_idx_images(&img_path, &[first, second]);
        write_idx_labels(&lbl_path, &[1, 7]);

        let set = load_mnist_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.image(0)[0], 17);
        assert_eq!(set.image(0)[783], 255);
        assert_eq!(set.image(1), &[9u8; MNIST_PIXELS][..]);
        assert_eq!((set.label(0), set.label(1)), (1, 7));
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let img_path = tmp("badmagic-images.idx");
        let lbl_path = tmp("badmagic-labels.idx");
        write_idx_images(&img_path, &[[0; MNIST_PIXELS]]);
        write_idx_labels(&lbl_path, &[3]);

        let mut corrupted = fs::read(&img_path).unwrap();
        corrupted[3] = 0x99;
        let bad_path = tmp("corrupted-images.idx");
        fs::write(&bad_path, &corrupted).unwrap();
        assert!(matches!(
            load_mnist_idx(&bad_path, &lbl_path).unwrap_err(),
            DataError::IdxFormat { offset: 0, .. }
        ));

        let truncated = &fs::read(&img_path).unwrap()[..200];
        let trunc_path = tmp("truncated-images.idx");
        fs::write(&trunc_path, truncated).unwrap();
        assert!(matches!(
            load_mnist_idx(&trunc_path, &lbl_path).unwrap_err(),
            DataError::IdxFormat { offset: 16, .. }
        ));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let img_path = tmp("mismatch-images.idx");
        let lbl_path = tmp("mismatch-labels.idx");
        write_idx_images(&img_path, &[[0; MNIST_PIXELS], [1; MNIST_PIXELS]]);
        write_idx_labels(&lbl_path, &[3]);
        assert!(matches!(
            load_mnist_idx(&img_path, &lbl_path).unwrap_err(),
            DataError::CountMismatch { images: 2, labels: 1 }
        ));
    }

    #[test]
    fn composite_value_reads_the_grid_in_order() {
        assert_eq!(compose_value::<f64>(1, 5, 9, 8), 0.1598);
        assert_eq!(compose_value::<f64>(0, 0, 0, 0), 0.0);
        assert_eq!(compose_value::<f64>(9, 9, 9, 9), 0.9999);
    }

    #[test]
    fn composite_places_four_images_in_a_square() {
        let (img_path, lbl_path) = fixture_paths("grid");
        let set = Arc::new(load_mnist_idx(&img_path, &lbl_path).unwrap());
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (input, value) = mnist_composite::<f64>(&set, &mut rng);
        assert_eq!(input.len(), COMPOSITE_PIXELS);
        assert!((0.0..1.0).contains(&value));

        // Each quadrant is flat-shaded, so its normalized value is constant
        // and identifies the digit that was placed there.
        let quadrant_digit = |qr: usize, qc: usize| {
            let v = input[(qr * MNIST_SIDE) * COMPOSITE_SIDE + qc * MNIST_SIDE];
            let raw = v * set.pixel_std() + set.pixel_mean();
            (raw / 20.0).round() as u32
        };
        let decoded = 1000 * quadrant_digit(0, 0)
            + 100 * quadrant_digit(0, 1)
            + 10 * quadrant_digit(1, 0)
            + quadrant_digit(1, 1);
        assert_eq!(decoded as f64 / 10_000.0, value);
    }

    /// One flat-shaded image per digit with an asymmetric value map
    /// (2 d^2), so a pixel value and its inversion can never be confused.
    fn asymmetric_fixture(prefix: &str) -> (PathBuf, PathBuf) {
        let images: Vec<[u8; MNIST_PIXELS]> =
            (0u32..10).map(|d| [(2 * d * d) as u8; MNIST_PIXELS]).collect();
        let labels: Vec<u8> = (0..10).collect();
        let img_path = tmp(&format!("{prefix}-images.idx"));
        let lbl_path = tmp(&format!("{prefix}-labels.idx"));
        write_idx_images(&img_path, &images);
        write_idx_labels(&lbl_path, &labels);
        (img_path, lbl_path)
    }

    #[test]
    fn mnist_sampler_inverts_sin_inputs_and_balances_subtasks() {
        let (img_path, lbl_path) = asymmetric_fixture("sampler");
        let set = Arc::new(load_mnist_idx(&img_path, &lbl_path).unwrap());
        let raw_values: Vec<f64> = (0u32..10).map(|d| (2 * d * d) as f64).collect();
        let in_raw_set = |w: f64| raw_values.iter().any(|&r| (w - r).abs() < 1e-6);

        let mut sampler = MnistSampler::<f64>::new(
            Arc::clone(&set),
            SubtaskSpec::LogS,
            Some(SubtaskSpec::SinL),
            4,
            0,
        )
        .unwrap();
        let batch = sampler.batch(4000);
        let mut b_count = 0usize;
        for s in &batch.samples {
            // Undo normalization both ways; exactly one lands in the raw
            // pixel value set, and it must agree with the subtask tag.
            let v = s.input[0];
            let direct = v * set.pixel_std() + set.pixel_mean();
            let inverted = -v * set.pixel_std() + set.pixel_mean();
            match s.subtask {
                SubtaskTag::A => {
                    assert!(in_raw_set(direct), "log sample looks inverted: {direct}");
                }
                SubtaskTag::B => {
                    assert!(in_raw_set(inverted), "sin sample not inverted: {inverted}");
                    b_count += 1;
                }
            }
        }
        let frac = b_count as f64 / batch.samples.len() as f64;
        assert!((frac - 0.5).abs() < 0.03);

        // Inversion is an involution: applying it twice restores the input.
        let sample = &batch.samples[0];
        let twice: Vec<f64> = sample.input.iter().map(|v| -(-v)).collect();
        assert_eq!(&twice, &sample.input);
    }

    #[test]
    fn mnist_sampler_is_deterministic() {
        let (img_path, lbl_path) = fixture_paths("det");
        let set = Arc::new(load_mnist_idx(&img_path, &lbl_path).unwrap());
        let mut a =
            MnistSampler::<f64>::new(Arc::clone(&set), SubtaskSpec::LogS, Some(SubtaskSpec::SinS), 5, 1)
                .unwrap();
        let mut b =
            MnistSampler::<f64>::new(set, SubtaskSpec::LogS, Some(SubtaskSpec::SinS), 5, 1).unwrap();
        assert_eq!(a.batch(64), b.batch(64));
    }
}
