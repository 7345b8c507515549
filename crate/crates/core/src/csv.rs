//! Plain comma-separated serialization helpers.
//!
//! All on-disk artifacts are unquoted CSV. Floating-point values are written
//! with 17 significant digits so that parse → format round-trips are
//! byte-identical and lossless for f64.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Format an f64 with 17 significant digits. NaN serializes as `NaN`.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{:.16e}", x)
    }
}

pub fn parse_float(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("expected a real number, got `{field}`")))
}

pub fn parse_usize(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("expected a non-negative integer, got `{field}`")))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|s| s.to_string()).collect())
}

/// Write a dense matrix, one row per line, optionally preceded by a header.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_float(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

/// Read a dense matrix written by [`write_matrix`].
///
/// Returns the matrix and the header row when `has_header` is set. Every data
/// row must have the same number of fields.
pub fn read_matrix(path: &Path, has_header: bool) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let lines = read_lines(path)?;
    let mut iter = lines.iter().enumerate();
    let header = if has_header {
        match iter.next() {
            Some((_, h)) => Some(h.split(',').map(|s| s.trim().to_string()).collect()),
            None => return Err(Error::parse(path, 1, "file is empty".to_string())),
        }
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in iter {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            row.push(parse_float(f, path, idx + 1)?);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("expected {} fields, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "no data rows".to_string()));
    }
    let ncols = rows[0].len();
    let nrows = rows.len();
    let m = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    Ok((m, header))
}

/// Write `key,value` rows.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::from("key,value\n");
    for (k, v) in pairs {
        out.push_str(k);
        out.push(',');
        out.push_str(v);
        out.push('\n');
    }
    write_file(path, &out)
}

/// Read `key,value` rows written by [`write_key_values`].
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let lines = read_lines(path)?;
    if lines.first().map(|l| l.trim()) != Some("key,value") {
        return Err(Error::parse(path, 1, "expected header `key,value`".to_string()));
    }
    let mut pairs = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once(',') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => return Err(Error::parse(path, idx + 1, "expected `key,value`".to_string())),
        }
    }
    Ok(pairs)
}
