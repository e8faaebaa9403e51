//! Parameter checkpoints: a self-describing text container with named
//! tensors, shapes, optimizer state, and a format-version line.
//!
//! Values are written as raw IEEE bit patterns in hex, so a save/load
//! roundtrip is bit-exact.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::num::Real;

use super::params::{ModelParams, Tensor};

const MAGIC: &str = "scalereg-checkpoint";
const VERSION: &str = "v1";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format { line: usize, message: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "checkpoint I/O error: {e}"),
            Self::Format { line, message } => {
                write!(f, "checkpoint format error at line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn hex_line<T: Real>(data: &[T]) -> String {
    let mut s = String::with_capacity(data.len() * 17);
    for (i, v) in data.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{:016x}", v.to_bits_u64()));
    }
    s
}

/// Serializes every parameter tensor with its Adam moments.
pub fn save_checkpoint<T: Real>(
    params: &ModelParams<T>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!("scalar {}\n", T::scalar_name()));
    out.push_str(&format!("adam_steps {}\n", params.adam_steps()));
    out.push_str(&format!("tensors {}\n", params.param_count()));
    for idx in 0..params.param_count() {
        let (name, value, m1, m2) = params.entry_parts(idx);
        out.push_str(&format!("tensor {name} {} {}\n", value.rows(), value.cols()));
        out.push_str(&format!("value {}\n", hex_line(value.data())));
        out.push_str(&format!("moment1 {}\n", hex_line(m1.data())));
        out.push_str(&format!("moment2 {}\n", hex_line(m2.data())));
    }
    fs::write(path, out)?;
    Ok(())
}

struct Lines<'a> {
    iter: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str, CheckpointError> {
        self.line_no += 1;
        self.iter.next().ok_or(CheckpointError::Format {
            line: self.line_no,
            message: "unexpected end of file".to_string(),
        })
    }

    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            line: self.line_no,
            message: message.into(),
        }
    }

    fn expect_field<'b>(&self, line: &'b str, key: &str) -> Result<&'b str, CheckpointError> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`, got `{line}`")))
    }
}

fn parse_hex_data<T: Real>(
    lines: &Lines<'_>,
    text: &str,
    expected: usize,
) -> Result<Vec<T>, CheckpointError> {
    let mut data = Vec::with_capacity(expected);
    for word in text.split(' ').filter(|w| !w.is_empty()) {
        let bits = u64::from_str_radix(word, 16)
            .map_err(|_| lines.err(format!("bad hex word `{word}`")))?;
        data.push(T::from_bits_u64(bits));
    }
    if data.len() != expected {
        return Err(lines.err(format!("expected {expected} values, got {}", data.len())));
    }
    Ok(data)
}

/// Reads back a checkpoint written by [`save_checkpoint`] for the same
/// scalar type.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>, CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut lines = Lines {
        iter: text.lines(),
        line_no: 0,
    };

    let header = lines.next_line()?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(lines.err(format!("unrecognized header `{header}`")));
    }
    let line = lines.next_line()?;
    let scalar = lines.expect_field(line, "scalar")?.to_string();
    if scalar != T::scalar_name() {
        return Err(lines.err(format!(
            "checkpoint holds {scalar} values, expected {}",
            T::scalar_name()
        )));
    }
    let steps: u64 = {
        let line = lines.next_line()?;
        let f = lines.expect_field(line, "adam_steps")?;
        f.parse().map_err(|_| lines.err("bad adam_steps"))?
    };
    let count: usize = {
        let line = lines.next_line()?;
        let f = lines.expect_field(line, "tensors")?;
        f.parse().map_err(|_| lines.err("bad tensor count"))?
    };

    let mut params = ModelParams::<T>::new();
    params.set_adam_steps(steps);
    for _ in 0..count {
        let line = lines.next_line()?;
        let decl = lines.expect_field(line, "tensor")?;
        let mut parts = decl.split(' ');
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| lines.err("missing tensor name"))?
            .to_string();
        let rows: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| lines.err("bad row count"))?;
        let cols: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| lines.err("bad column count"))?;
        let expected = rows * cols;

        let mut tensors = Vec::with_capacity(3);
        for key in ["value", "moment1", "moment2"] {
            let line = lines.next_line()?;
            let body = lines.expect_field(line, key)?;
            let data = parse_hex_data::<T>(&lines, body, expected)?;
            let mut t = Tensor::zeros(rows, cols);
            t.data_mut().copy_from_slice(&data);
            tensors.push(t);
        }
        let m2 = tensors.pop().unwrap();
        let m1 = tensors.pop().unwrap();
        let value = tensors.pop().unwrap();
        params.push_loaded(name, value, m1, m2);
    }
    Ok(params)
}
