//! Per-image CTF parameters as CSV:
//! `index,defocus_A,cs_mm,kv,amp_contrast,bfactor_A2`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ctf::CtfParams;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["index", "defocus_A", "cs_mm", "kv", "amp_contrast", "bfactor_A2"];

fn parse_number(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::format(
            path,
            format!("line {line}: column {column}: '{cell}' is not a finite number"),
        )),
    }
}

/// Parses a CTF table. Rows may appear in any order but the indices must
/// be exactly `0..K` with no duplicates; the result is ordered by index.
pub fn parse_ctf_table(path: &Path, text: &str) -> Result<Vec<CtfParams>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let mut col = HashMap::new();
    for name in COLUMNS {
        let pos = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("line 1: missing column '{name}'")))?;
        col.insert(name, pos);
    }
    if headers.len() != COLUMNS.len() {
        return Err(Error::format(
            path,
            format!("line 1: expected {} columns, found {}", COLUMNS.len(), headers.len()),
        ));
    }
    let mut rows: Vec<Option<CtfParams>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::format(path, format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cell = |name: &str| &rec[col[name]];
        let raw_index = cell("index");
        let index: usize = raw_index.parse().map_err(|_| {
            Error::format(path, format!("line {line}: index '{raw_index}' is not a non-negative integer"))
        })?;
        let get = |name: &str| parse_number(path, line, name, cell(name));
        let params = CtfParams::new(
            get("defocus_A")?,
            get("cs_mm")?,
            get("kv")?,
            get("amp_contrast")?,
            get("bfactor_A2")?,
        )
        .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        if index >= rows.len() {
            rows.resize(index + 1, None);
        }
        if rows[index].is_some() {
            return Err(Error::format(path, format!("line {line}: duplicate index {index}")));
        }
        rows[index] = Some(params);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::format(path, format!("missing index {i}"))))
        .collect()
}

pub fn read_ctf_table(path: impl AsRef<Path>) -> Result<Vec<CtfParams>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ctf_table(path, &text)
}

pub fn format_ctf_table(params: &[CtfParams]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for (i, p) in params.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{}",
            p.defocus, p.spherical_aberration, p.voltage, p.amplitude_contrast, p.envelope_b_factor
        )
        .expect("string write");
    }
    out
}

pub fn write_ctf_table(path: impl AsRef<Path>, params: &[CtfParams]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ctf_table(params)).map_err(|e| Error::io(path, e))
}
