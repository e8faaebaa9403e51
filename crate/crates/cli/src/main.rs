//! Command-line entry point.
//!
//! Subcommands: `train` (one run), `sweep` (learning-rate grid across
//! target magnitudes), `memreport` (analytic output-head byte accounting),
//! and `codec-check` (exhaustive digit/bucket self-test).
//!
//! Every run directory receives a byte-for-byte echo of the config and the
//! effective seed next to the CSV outputs, which is enough to reproduce the
//! run exactly. Existing files are never overwritten without `--force`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.

mod config;
mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use scalereg_core::codec::BucketSpec;
use scalereg_core::harness::{
    lr_sweep, memory_report, train, write_memory_csv, write_metrics_csv, write_sweep_csv,
};

/// Seed override of last resort, consulted when neither `--seed` nor the
/// config file provides one.
const SEED_ENV: &str = "SCALEREG_SEED";

#[derive(Parser)]
#[command(name = "scalereg", version, about = "Regression experiments on scale-varying targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics CSV.
    Train(TrainArgs),
    /// Train one model per (objective, learning rate, magnitude) cell.
    Sweep(SweepArgs),
    /// Analytic memory accounting for explicit vs autoregressive heads.
    Memreport(MemArgs),
    /// Exhaustive digit-code and bucket-reconstruction self-test.
    CodecCheck,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines; see README).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (beats the config file and SCALEREG_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write an SVG plot of the error curves.
    #[arg(long)]
    plot: bool,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MemArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

enum CliError {
    /// Config file missing or malformed -> exit 3.
    Config(String),
    /// Everything else that fails at runtime -> exit 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) | Self::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Memreport(args) => run_memreport(args),
        Command::CodecCheck => run_codec_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scalereg: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(3),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

fn read_config(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))
}

fn config_error(path: &Path, e: config::ConfigError) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Seed precedence: `--seed` flag, then the config file, then the
/// SCALEREG_SEED environment variable, then 0.
fn resolve_seed(flag: Option<u64>, from_file: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = from_file {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| CliError::Runtime(format!("{SEED_ENV}=`{text}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

struct OutDir {
    dir: PathBuf,
    force: bool,
}

impl OutDir {
    fn create(dir: &Path, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
        })
    }

    /// Refuses to clobber existing files unless `--force` was given.
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(CliError::Runtime(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let text = read_config(&args.config)?;
    let parsed = config::parse_train_config(&text).map_err(|e| config_error(&args.config, e))?;
    let seed = resolve_seed(args.seed, parsed.seed_from_file)?;
    let mut cfg = parsed.config;
    cfg.seed = seed;
    cfg.validate().map_err(|e| config_error(&args.config, config::ConfigError {
        line: None,
        message: e.to_string(),
    }))?;

    let out = OutDir::create(&args.out, args.force)?;
    out.write("config.txt", text.as_bytes())?;
    out.write("seed.txt", format!("{seed}\n").as_bytes())?;

    let metrics = train(&cfg).map_err(runtime)?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &metrics).map_err(runtime)?;
    let csv_path = out.write("metrics.csv", &csv)?;

    if args.plot {
        let svg = plot::render_svg(&metrics).map_err(runtime)?;
        out.write("plot.svg", svg.as_bytes())?;
    }

    let last = metrics.records.last().expect("at least the step-0 record");
    println!(
        "{} lr={:?} seed={seed}: {} steps, final combined error {:?}",
        cfg.objective,
        cfg.lr,
        last.step,
        last.error_combined
    );
    if let Some(step) = metrics.diverged_at {
        println!("diverged at step {step}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), CliError> {
    let text = read_config(&args.config)?;
    let parsed = config::parse_sweep_config(&text).map_err(|e| config_error(&args.config, e))?;
    let seed = resolve_seed(args.seed, parsed.seed_from_file)?;
    let mut base = parsed.base;
    base.seed = seed;

    let out = OutDir::create(&args.out, args.force)?;
    out.write("config.txt", text.as_bytes())?;
    out.write("seed.txt", format!("{seed}\n").as_bytes())?;

    let table = lr_sweep(&base, &parsed.objectives, &parsed.magnitudes, &parsed.lrs)
        .map_err(runtime)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &table).map_err(runtime)?;
    let csv_path = out.write("sweep.csv", &csv)?;

    for &objective in &parsed.objectives {
        for &magnitude in &parsed.magnitudes {
            if let Some(idx) = table.argmin_lr_index(objective, magnitude) {
                println!(
                    "{objective} m={magnitude}: best lr {:?} (grid index {idx})",
                    table.lrs[idx]
                );
            }
        }
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run_memreport(args: MemArgs) -> Result<(), CliError> {
    let text = read_config(&args.config)?;
    let parsed =
        config::parse_memreport_config(&text).map_err(|e| config_error(&args.config, e))?;
    let rows = memory_report(&parsed.config, &parsed.shapes);

    let mut csv = Vec::new();
    write_memory_csv(&mut csv, &rows).map_err(runtime)?;
    print!("{}", String::from_utf8_lossy(&csv));

    if let Some(dir) = &args.out {
        let out = OutDir::create(dir, args.force)?;
        out.write("config.txt", text.as_bytes())?;
        let path = out.write("memory.csv", &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Exhaustive digit/index roundtrip over every base <= 16 and length <= 4,
/// plus a million random bucket-reconstruction checks.
fn run_codec_check() -> Result<(), CliError> {
    let mut codes_checked = 0u64;
    let mut failures = 0u64;
    for base in 2..=16u32 {
        for steps in 1..=4u32 {
            let spec = BucketSpec::<f64>::new(0.0, 1.0, base, steps).map_err(runtime)?;
            for index in 0..spec.bucket_count() {
                let code = spec.digits_of_index(index).map_err(runtime)?;
                let back = spec.index_of_digits(code.digits()).map_err(runtime)?;
                if back != index || code.len() != steps as usize {
                    failures += 1;
                }
                codes_checked += 1;
            }
        }
    }
    println!("digit roundtrip: {codes_checked} codes checked, {failures} failures");

    let mut rng = ChaCha12Rng::seed_from_u64(0xC0DEC);
    let mut reconstructions = 0u64;
    let mut reconstruction_failures = 0u64;
    for _ in 0..100 {
        let lo: f64 = rng.random_range(-1e8..1e8);
        let span: f64 = rng.random_range(1e-3..1e9);
        let base = rng.random_range(2..=16u32);
        let steps = rng.random_range(1..=8u32);
        let spec = BucketSpec::new(lo, lo + span, base, steps).map_err(runtime)?;
        let half = spec.width() / 2.0;
        for _ in 0..10_000 {
            let y = rng.random_range(lo..lo + span);
            let mid = spec
                .bucket_index(y)
                .and_then(|a| spec.bucket_midpoint(a))
                .map_err(runtime)?;
            if (mid - y).abs() > half * (1.0 + 1e-9) {
                reconstruction_failures += 1;
            }
            reconstructions += 1;
        }
    }
    println!(
        "midpoint reconstruction: {reconstructions} targets checked, \
         {reconstruction_failures} failures"
    );

    if failures + reconstruction_failures > 0 {
        return Err(CliError::Runtime(format!(
            "{} codec checks failed",
            failures + reconstruction_failures
        )));
    }
    Ok(())
}
