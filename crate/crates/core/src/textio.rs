//! Plain-text interchange format.
//!
//! ```text
//! m n
//! a11 a12 ... a1n
//! ...
//! ```
//!
//! Vectors are written as `m 1` matrices. Masks use the same layout with
//! `0`/`1` entries. Reals are printed with Rust's shortest round-trip
//! formatting, so a write/read cycle is lossless and output is byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::missingness::MaskMatrix;

pub fn format_matrix(a: &DenseMatrix) -> String {
    let mut s = format!("{} {}\n", a.rows(), a.cols());
    for i in 0..a.rows() {
        push_row(&mut s, a.row(i).iter());
    }
    s
}

pub fn format_vector(v: &[f64]) -> String {
    let mut s = format!("{} 1\n", v.len());
    for x in v {
        let _ = writeln!(s, "{x}");
    }
    s
}

pub fn format_mask(mask: &MaskMatrix) -> String {
    let mut s = format!("{} {}\n", mask.rows(), mask.cols());
    for i in 0..mask.rows() {
        let line: Vec<&str> = mask
            .row(i)
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn push_row<'a>(s: &mut String, vals: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in vals {
        if !first {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
        first = false;
    }
    s.push('\n');
}

fn parse_err(source_name: &str, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        reason: reason.into(),
    }
}

/// Parses the header and body into `(rows, cols, entries)`.
fn parse_table(text: &str, source_name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(source_name, 1, "missing `rows cols` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(source_name, hline + 1, "header must be `rows cols`"));
    }
    let parse_dim = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| parse_err(source_name, hline + 1, format!("bad dimension `{t}`")))
    };
    let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(source_name, ln + 1, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                source_name,
                ln + 1,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(
            source_name,
            hline + 1,
            format!("header declares {rows} rows, found {seen}"),
        ));
    }
    Ok((rows, cols, data))
}

pub fn parse_matrix(text: &str, source_name: &str) -> Result<DenseMatrix> {
    let (rows, cols, data) = parse_table(text, source_name)?;
    DenseMatrix::new(rows, cols, data)
}

pub fn parse_vector(text: &str, source_name: &str) -> Result<Vec<f64>> {
    let (_, cols, data) = parse_table(text, source_name)?;
    if cols != 1 {
        return Err(parse_err(source_name, 1, "vectors must be written as `m 1`"));
    }
    crate::matrix::check_finite(&data)?;
    Ok(data)
}

pub fn parse_mask(text: &str, source_name: &str) -> Result<MaskMatrix> {
    let (rows, cols, data) = parse_table(text, source_name)?;
    let mut bits = Vec::with_capacity(data.len());
    for v in data {
        match v {
            x if x == 0.0 => bits.push(false),
            x if x == 1.0 => bits.push(true),
            _ => return Err(parse_err(source_name, 0, format!("mask entry {v} is not 0 or 1"))),
        }
    }
    MaskMatrix::new(rows, cols, bits)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    parse_matrix(&read_to_string(path)?, &path.display().to_string())
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    parse_vector(&read_to_string(path)?, &path.display().to_string())
}

pub fn load_mask(path: &Path) -> Result<MaskMatrix> {
    parse_mask(&read_to_string(path)?, &path.display().to_string())
}
