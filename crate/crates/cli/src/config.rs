//! Flat `key = value` config files.
//!
//! One assignment per line, `#` comments, optional `[section]` headers.
//! Keys before any section apply to every subcommand; a `[train]`,
//! `[sweep]`, or `[memreport]` section applies to that subcommand only and
//! other sections are ignored. Unknown keys in scope are hard errors, as
//! are duplicates — a mistyped key must never silently fall back to a
//! default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use scalereg_core::data::SubtaskSpec;
use scalereg_core::harness::{Domain, MemoryReportConfig, Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Key/value assignments visible to one subcommand, with line provenance.
struct Scope {
    entries: BTreeMap<String, (usize, String)>,
}

impl Scope {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, value)) => value.parse::<T>().map(Some).map_err(|_| {
                ConfigError::at(line, format!("`{key}` must be {what}, got `{value}`"))
            }),
        }
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, what: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse(key, what)?.unwrap_or(default))
    }

    /// Errors on any key that was never consumed.
    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(ConfigError::at(line, format!("unknown key `{key}`")));
        }
        Ok(())
    }
}

/// Splits the raw text into the scope visible to `section`.
fn scope_for(text: &str, section: &str) -> Result<Scope, ConfigError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.split_once('#') {
            Some((before, _)) => before,
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line_no, "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(ConfigError::at(line_no, "empty section name"));
            }
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::at(line_no, "empty key"));
        }
        let in_scope = match &current {
            None => true,
            Some(name) => name == section,
        };
        if in_scope {
            if let Some((first_line, _)) = entries.get(&key) {
                return Err(ConfigError::at(
                    line_no,
                    format!("duplicate key `{key}` (first set on line {first_line})"),
                ));
            }
            entries.insert(key, (line_no, value));
        }
    }
    Ok(Scope { entries })
}

fn require<T>(
    fields: &mut Vec<&'static str>,
    key: &'static str,
    value: Option<T>,
) -> Option<T> {
    if value.is_none() {
        fields.push(key);
    }
    value
}

fn missing_keys_error(missing: &[&str]) -> ConfigError {
    ConfigError::general(format!("missing required keys: {}", missing.join(", ")))
}

/// Seed handling shared by train and sweep: the file may set one, the CLI
/// flag and environment act as overrides/fallback elsewhere.
#[derive(Debug)]
pub struct ParsedTrain {
    pub config: TrainConfig<f64>,
    pub seed_from_file: Option<u64>,
}

pub fn parse_train_config(text: &str) -> Result<ParsedTrain, ConfigError> {
    let mut scope = scope_for(text, "train")?;

    let mut missing = Vec::new();
    let objective = require(
        &mut missing,
        "objective",
        scope.parse::<Objective>("objective", "one of MSE, MSE+norm, MAE, ARR")?,
    );
    let domain = require(
        &mut missing,
        "domain",
        scope.parse::<Domain>("domain", "toy1d or mnist")?,
    );
    let subtask_a = require(
        &mut missing,
        "subtask_a",
        scope.parse::<SubtaskSpec>("subtask_a", "a subtask name such as log_s or sin_m:3")?,
    );
    let lr = require(&mut missing, "lr", scope.parse::<f64>("lr", "a positive number")?);

    let seed_from_file = scope.parse::<u64>("seed", "an unsigned integer")?;
    // Assemble on placeholders so unknown-key detection can run first even
    // when required keys are absent.
    let mut config = TrainConfig::desk(
        objective.unwrap_or(Objective::Mse),
        domain.unwrap_or(Domain::Toy1d),
        subtask_a.unwrap_or(SubtaskSpec::SinS),
        None,
        lr.unwrap_or(1.0),
        0,
    );
    config.subtask_b = scope.parse::<SubtaskSpec>("subtask_b", "a subtask name")?;
    config.base = scope.parse_or("b", "an integer >= 2", config.base)?;
    config.steps = scope.parse_or("s", "an integer >= 1", config.steps)?;
    config.batch_size = scope.parse_or("batch_size", "a positive integer", config.batch_size)?;
    config.total_samples =
        scope.parse_or("total_samples", "an unsigned integer", config.total_samples)?;
    config.eval_interval =
        scope.parse_or("eval_interval", "a positive integer", config.eval_interval)?;
    config.eval_set_size =
        scope.parse_or("eval_set_size", "a positive integer", config.eval_set_size)?;
    config.mean_samples =
        scope.parse_or("mean_samples", "a positive integer", config.mean_samples)?;
    config.hidden_width =
        scope.parse_or("hidden_width", "a positive integer", config.hidden_width)?;
    config.encoder_layers =
        scope.parse_or("encoder_layers", "a positive integer", config.encoder_layers)?;
    config.step_hidden =
        scope.parse_or("step_hidden", "an unsigned integer", config.step_hidden)?;
    config.embed_dim = scope.parse_or("embed_dim", "a positive integer", config.embed_dim)?;
    config.mnist_images = scope.parse::<PathBuf>("mnist_images", "a file path")?;
    config.mnist_labels = scope.parse::<PathBuf>("mnist_labels", "a file path")?;
    scope.finish()?;
    if !missing.is_empty() {
        return Err(missing_keys_error(&missing));
    }

    // Seed is patched in by the caller after override resolution.
    Ok(ParsedTrain {
        config,
        seed_from_file,
    })
}

#[derive(Debug)]
pub struct ParsedSweep {
    pub base: TrainConfig<f64>,
    pub objectives: Vec<Objective>,
    pub magnitudes: Vec<i32>,
    pub lrs: Vec<f64>,
    pub seed_from_file: Option<u64>,
}

pub fn parse_sweep_config(text: &str) -> Result<ParsedSweep, ConfigError> {
    let mut scope = scope_for(text, "sweep")?;

    let mut missing = Vec::new();
    let domain = require(
        &mut missing,
        "domain",
        scope.parse::<Domain>("domain", "toy1d or mnist")?,
    );
    let objectives_raw = require(&mut missing, "objectives", scope.take("objectives"));
    let magnitudes_raw = require(&mut missing, "magnitudes", scope.take("magnitudes"));

    let objectives = match objectives_raw {
        Some((line, raw)) => raw
            .split(',')
            .map(|o| o.trim().parse::<Objective>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError::at(line, e))?,
        None => Vec::new(),
    };
    let magnitudes = match magnitudes_raw {
        Some((line, raw)) => raw
            .split(',')
            .map(|m| m.trim().parse::<i32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::at(line, "magnitudes must be a comma list of integers"))?,
        None => Vec::new(),
    };

    let exp_max = scope.parse_or("lr_exp_max", "a number", 1.0)?;
    let exp_min = scope.parse_or("lr_exp_min", "a number", -6.0)?;
    let exp_step = scope.parse_or("lr_exp_step", "a positive number", 0.5)?;
    if exp_step <= 0.0 || exp_max < exp_min {
        return Err(ConfigError::general(
            "lr grid requires lr_exp_max >= lr_exp_min and lr_exp_step > 0",
        ));
    }
    let lrs = scalereg_core::harness::lr_grid(exp_max, exp_min, exp_step);

    let seed_from_file = scope.parse::<u64>("seed", "an unsigned integer")?;
    // Placeholder subtask and lr; the sweep overwrites both per cell.
    let mut base = TrainConfig::desk(
        objectives.first().copied().unwrap_or(Objective::Mse),
        domain.unwrap_or(Domain::Toy1d),
        SubtaskSpec::SinM { magnitude: 0 },
        None,
        1.0,
        0,
    );
    base.base = scope.parse_or("b", "an integer >= 2", base.base)?;
    base.steps = scope.parse_or("s", "an integer >= 1", base.steps)?;
    base.batch_size = scope.parse_or("batch_size", "a positive integer", base.batch_size)?;
    base.total_samples =
        scope.parse_or("total_samples", "an unsigned integer", base.total_samples)?;
    base.eval_interval =
        scope.parse_or("eval_interval", "a positive integer", base.eval_interval)?;
    base.eval_set_size =
        scope.parse_or("eval_set_size", "a positive integer", base.eval_set_size)?;
    base.mean_samples =
        scope.parse_or("mean_samples", "a positive integer", base.mean_samples)?;
    base.hidden_width =
        scope.parse_or("hidden_width", "a positive integer", base.hidden_width)?;
    base.encoder_layers =
        scope.parse_or("encoder_layers", "a positive integer", base.encoder_layers)?;
    base.step_hidden =
        scope.parse_or("step_hidden", "an unsigned integer", base.step_hidden)?;
    base.embed_dim = scope.parse_or("embed_dim", "a positive integer", base.embed_dim)?;
    base.mnist_images = scope.parse::<PathBuf>("mnist_images", "a file path")?;
    base.mnist_labels = scope.parse::<PathBuf>("mnist_labels", "a file path")?;
    scope.finish()?;
    if !missing.is_empty() {
        return Err(missing_keys_error(&missing));
    }

    Ok(ParsedSweep {
        base,
        objectives,
        magnitudes,
        lrs,
        seed_from_file,
    })
}

#[derive(Debug)]
pub struct ParsedMemReport {
    pub config: MemoryReportConfig,
    pub shapes: Vec<(u64, u32)>,
}

pub fn parse_memreport_config(text: &str) -> Result<ParsedMemReport, ConfigError> {
    let mut scope = scope_for(text, "memreport")?;

    let shapes_raw = scope.take("shapes");
    let Some((line, raw)) = shapes_raw else {
        return Err(missing_keys_error(&["shapes"]));
    };
    let shapes = raw
        .split(',')
        .map(|pair| {
            let (b, s) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| ConfigError::at(line, format!("shape `{pair}` is not `b:s`")))?;
            let b = b.trim().parse::<u64>().map_err(|_| {
                ConfigError::at(line, format!("shape base `{b}` is not an unsigned integer"))
            })?;
            let s = s.trim().parse::<u32>().map_err(|_| {
                ConfigError::at(line, format!("shape steps `{s}` is not an unsigned integer"))
            })?;
            Ok((b, s))
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    if shapes.is_empty() {
        return Err(ConfigError::at(line, "shapes must list at least one b:s pair"));
    }

    let defaults = MemoryReportConfig::default();
    let config = MemoryReportConfig {
        hidden_dim: scope.parse_or("hidden_dim", "a positive integer", defaults.hidden_dim)?,
        embed_dim: scope.parse_or("embed_dim", "a positive integer", defaults.embed_dim)?,
        bytes_per_param: scope.parse_or(
            "bytes_per_param",
            "a positive integer",
            defaults.bytes_per_param,
        )?,
        budget_bytes: scope.parse_or("budget_bytes", "an unsigned integer", defaults.budget_bytes)?,
    };
    scope.finish()?;
    Ok(ParsedMemReport { config, shapes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_train_config_lists_missing_keys() {
        let err = parse_train_config("").unwrap_err();
        assert!(err.line.is_none());
        for key in ["objective", "domain", "subtask_a", "lr"] {
            assert!(err.message.contains(key), "message lacks {key}: {}", err.message);
        }
    }

    #[test]
    fn arr_config_parses_with_defaults() {
        let parsed = parse_train_config(
            "objective = ARR\ndomain = toy1d\nsubtask_a = log_s\nsubtask_b = sin_l\nlr = 0.003\nb = 10\ns = 8\n",
        )
        .unwrap();
        let cfg = parsed.config;
        assert_eq!(cfg.objective, Objective::Arr);
        assert_eq!((cfg.base, cfg.steps), (10, 8));
        assert_eq!(cfg.bucket_spec().unwrap().bucket_count(), 100_000_000);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.eval_set_size, 4096);
        assert_eq!(parsed.seed_from_file, None);
    }

    #[test]
    fn base_below_two_fails_validation() {
        let parsed = parse_train_config(
            "objective = ARR\ndomain = toy1d\nsubtask_a = log_s\nlr = 0.01\nb = 1\n",
        )
        .unwrap();
        assert!(parsed.config.validate().is_err());
    }

    #[test]
    fn unknown_and_duplicate_keys_carry_line_numbers() {
        let err = parse_train_config(
            "objective = ARR\ndomain = toy1d\nsubtask_a = log_s\nlr = 0.01\nbatchsize = 4\n",
        )
        .unwrap_err();
        assert_eq!(err.line, Some(5));
        assert!(err.message.contains("batchsize"));

        let err = parse_train_config(
            "objective = ARR\ndomain = toy1d\nsubtask_a = log_s\nlr = 0.01\nlr = 0.02\n",
        )
        .unwrap_err();
        assert_eq!(err.line, Some(5));
        assert!(err.message.contains("duplicate"));
    }

    #[test]
    fn type_errors_carry_line_numbers() {
        let err = parse_train_config(
            "objective = ARR\ndomain = toy1d\nsubtask_a = log_s\nlr = fast\n",
        )
        .unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.message.contains("lr"));
    }

    #[test]
    fn comments_sections_and_foreign_sections() {
        let text = "\
seed = 7           # applies everywhere
[train]
objective = MAE    # trailing comment
domain = toy1d
subtask_a = sin_s
lr = 1e-2
[sweep]
objectives = MSE
magnitudes = 0,3
domain = toy1d
";
        let parsed = parse_train_config(text).unwrap();
        assert_eq!(parsed.config.objective, Objective::Mae);
        assert_eq!(parsed.seed_from_file, Some(7));

        let sweep = parse_sweep_config(text).unwrap();
        assert_eq!(sweep.objectives, vec![Objective::Mse]);
        assert_eq!(sweep.magnitudes, vec![0, 3]);
        assert_eq!(sweep.seed_from_file, Some(7));
        assert_eq!(sweep.lrs.len(), 15);
    }

    #[test]
    fn sweep_grid_defaults_to_the_protocol() {
        let sweep =
            parse_sweep_config("domain = toy1d\nobjectives = ARR,MSE\nmagnitudes = 0,3,6\n")
                .unwrap();
        assert_eq!(sweep.lrs.len(), 15);
        assert!((sweep.lrs[0] - 10.0).abs() < 1e-12);
        assert!((sweep.lrs[14] - 1e-6).abs() < 1e-18);
        assert_eq!(sweep.objectives, vec![Objective::Arr, Objective::Mse]);
    }

    #[test]
    fn memreport_config_parses_shapes() {
        let parsed =
            parse_memreport_config("shapes = 1000000:1, 100:3, 100:8\nbytes_per_param = 4\n")
                .unwrap();
        assert_eq!(parsed.shapes, vec![(1_000_000, 1), (100, 3), (100, 8)]);
        assert_eq!(parsed.config.hidden_dim, 4096);

        let err = parse_memreport_config("shapes = 10x2\n").unwrap_err();
        assert_eq!(err.line, Some(1));
    }

    #[test]
    fn subtask_m_syntax_roundtrips_through_config() {
        let parsed = parse_train_config(
            "objective = MSE\ndomain = toy1d\nsubtask_a = sin_m:6\nlr = 0.1\n",
        )
        .unwrap();
        assert_eq!(parsed.config.subtask_a, SubtaskSpec::SinM { magnitude: 6 });
        assert_eq!(parsed.config.magnitude(), Some(6));
    }
}
