//! File formats: MRC maps and stacks, CTF tables, manifests, flat config
//! files, diagnostics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod ctf_table;
pub mod manifest;
pub mod mrc;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::reconstruct::DiagRow;

pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[DiagRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(DiagRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
