//! `TEN1` text serialization.
//!
//! ```text
//! TEN1 <ndim> <d0> <d1> ...
//! <values, row-major, whitespace separated, 9 significant digits>
//! ```
//!
//! Values are written one innermost row per line. Nine significant digits
//! round-trip every `f32` exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "TEN1";

/// Formats one value with 9 significant digits.
pub fn format_value<T: Scalar>(v: T) -> String {
    format!("{:.8e}", v)
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push_str(&format!(" {}", t.ndim()));
    for d in t.shape() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    let row = t.shape().last().copied().unwrap_or(1).max(1);
    for chunk in t.data().chunks(row) {
        let line: Vec<String> = chunk.iter().map(|&v| format_value(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(encode(t).as_bytes())
}

pub fn decode<T: Scalar>(text: &str, origin: &str) -> Result<Tensor<T>> {
    read(BufReader::new(text.as_bytes()), origin)
}

/// Parses a `TEN1` stream. `origin` names the source in error messages.
pub fn read<T: Scalar, R: Read>(r: R, origin: &str) -> Result<Tensor<T>> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| fmt_err(1, "empty input".into()))?
        .map_err(|e| Error::io(origin, e))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(fmt_err(1, format!("expected {MAGIC} header")));
    }
    let ndim: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(1, "missing rank".into()))?;
    let shape = fields
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fmt_err(1, format!("bad extent: {e}")))?;
    if shape.len() != ndim {
        return Err(fmt_err(
            1,
            format!("rank {ndim} but {} extents", shape.len()),
        ));
    }
    let expected: usize = shape.iter().product();
    let mut data = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<T>()
                .map_err(|_| fmt_err(i + 2, format!("bad value {tok:?}")))?;
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(fmt_err(
            1,
            format!(
                "shape {shape:?} needs {expected} values, found {}",
                data.len()
            ),
        ));
    }
    Tensor::new(shape, data)
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(file, &path.display().to_string())
}
