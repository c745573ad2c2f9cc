//! Binary checkpoints of the engine state (`CFRG1` format).
//!
//! Layout: magic `CFRG1`, a little-endian payload, then an FNV-1a 64-bit
//! checksum of the payload. Floats are stored as raw bits so a resumed run
//! continues bit-identically.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::importance::{FactorState, ImportanceState};
use crate::reconstruct::{DiagRow, EngineState};
use crate::sagd::SagdState;

pub const MAGIC: &[u8; 5] = b"CFRG1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LittleEndian>(v).expect("vec write");
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bool(&mut self, v: bool) {
        self.0.push(v as u8);
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.bool(v.is_some());
        if let Some(x) = v {
            self.f64(x);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u64(x as u64);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn importance(&mut self, s: &ImportanceState) {
        for f in &s.factors {
            self.usizes(&f.indices);
            self.f64s(&f.log_phi);
        }
        self.bool(s.last_seen.is_some());
        self.u64(s.last_seen.unwrap_or(0));
        self.u64(s.generation);
    }
    fn diag(&mut self, d: &DiagRow) {
        self.u64(d.iteration);
        self.u64(d.epoch);
        for x in [d.rho, d.epsilon, d.lipschitz, d.objective, d.mean_fraction] {
            self.f64(x);
        }
        for x in d.mean_ess {
            self.f64(x);
        }
        self.opt_f64(d.heldout_rremse);
        self.opt_f64(d.epoch_kl);
        self.bool(d.line_search);
    }
}

struct Dec<'a> {
    r: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Dec<'_> {
    fn short(&self) -> Error {
        Error::format(self.path, format!("checkpoint truncated at payload byte {}", self.r.position()))
    }
    fn u64(&mut self) -> Result<u64> {
        self.r.read_u64::<LittleEndian>().map_err(|_| self.short())
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let left = self.r.get_ref().len() as u64 - self.r.position();
        // every element takes at least one byte
        if n > left {
            return Err(Error::format(self.path, format!("corrupt length {n} in checkpoint")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.r.read_u8().map_err(|_| self.short())? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(self.path, format!("corrupt flag byte {b} in checkpoint"))),
        }
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.u64().map(|x| x as usize)).collect()
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut b = vec![0; n];
        self.r.read_exact(&mut b).map_err(|_| self.short())?;
        Ok(b)
    }
    fn importance(&mut self) -> Result<ImportanceState> {
        let mut factors: [FactorState; 3] = Default::default();
        for f in factors.iter_mut() {
            f.indices = self.usizes()?;
            f.log_phi = self.f64s()?;
            if f.indices.len() != f.log_phi.len() {
                return Err(Error::format(self.path, "importance factor with mismatched lengths"));
            }
        }
        let seen = self.bool()?;
        let last = self.u64()?;
        Ok(ImportanceState {
            factors,
            last_seen: seen.then_some(last),
            generation: self.u64()?,
        })
    }
    fn diag(&mut self) -> Result<DiagRow> {
        Ok(DiagRow {
            iteration: self.u64()?,
            epoch: self.u64()?,
            rho: self.f64()?,
            epsilon: self.f64()?,
            lipschitz: self.f64()?,
            objective: self.f64()?,
            mean_fraction: self.f64()?,
            mean_ess: [self.f64()?, self.f64()?, self.f64()?],
            heldout_rremse: self.opt_f64()?,
            epoch_kl: self.opt_f64()?,
            line_search: self.bool()?,
        })
    }
}

/// Serializes the state together with an opaque tag (the CLI stores the
/// resolved configuration there).
pub fn encode_checkpoint(state: &EngineState, tag: &str) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.bytes(tag.as_bytes());
    let s = &state.sagd;
    e.f64s(&s.v);
    e.u64(s.grad_memory.len() as u64);
    for m in &s.grad_memory {
        e.f64s(m);
    }
    e.f64s(&s.running_sum);
    e.f64(s.lipschitz);
    e.u64(s.tau);
    e.f64(state.rho);
    e.u64(state.generation);
    for set in [&state.states, &state.held_out_states] {
        e.u64(set.len() as u64);
        for st in set {
            e.importance(st);
        }
    }
    e.u64(state.held_out_visits);
    e.u64(state.rho_history.len() as u64);
    for &(t, v) in &state.rho_history {
        e.u64(t);
        e.f64(v);
    }
    e.bool(state.kl_prev.is_some());
    if let Some((g, dists)) = &state.kl_prev {
        e.u64(*g);
        e.u64(dists.len() as u64);
        for d in dists {
            e.f64s(d);
        }
    }
    e.bool(state.force_line_search);
    e.bool(state.calibrated);
    e.bool(state.converged);
    e.u64(state.diagnostics.len() as u64);
    for d in &state.diagnostics {
        e.diag(d);
    }
    let payload = e.0;
    let mut out = Vec::with_capacity(payload.len() + 13);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.write_u64::<LittleEndian>(fnv1a(&payload)).expect("vec write");
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(EngineState, String)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a CFRG1 checkpoint"));
    }
    let payload = &bytes[MAGIC.len()..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(payload) != stored {
        return Err(Error::format(path, "checkpoint checksum mismatch"));
    }
    let mut d = Dec {
        r: Cursor::new(payload),
        path,
    };
    let tag = String::from_utf8(d.bytes()?).map_err(|_| Error::format(path, "checkpoint tag is not UTF-8"))?;
    let v = d.f64s()?;
    let batches = d.len()?;
    let grad_memory = (0..batches).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?;
    let sagd = SagdState {
        v,
        grad_memory,
        running_sum: d.f64s()?,
        lipschitz: d.f64()?,
        tau: d.u64()?,
    };
    let rho = d.f64()?;
    let generation = d.u64()?;
    let mut sets = Vec::new();
    for _ in 0..2 {
        let n = d.len()?;
        sets.push((0..n).map(|_| d.importance()).collect::<Result<Vec<_>>>()?);
    }
    let held_out_states = sets.pop().expect("two sets");
    let states = sets.pop().expect("two sets");
    let held_out_visits = d.u64()?;
    let n = d.len()?;
    let rho_history = (0..n)
        .map(|_| Ok((d.u64()?, d.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    let kl_prev = if d.bool()? {
        let g = d.u64()?;
        let n = d.len()?;
        Some((g, (0..n).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?))
    } else {
        None
    };
    let force_line_search = d.bool()?;
    let calibrated = d.bool()?;
    let converged = d.bool()?;
    let n = d.len()?;
    let diagnostics = (0..n).map(|_| d.diag()).collect::<Result<Vec<_>>>()?;
    if d.r.position() as usize != payload.len() {
        return Err(Error::format(path, "trailing bytes in checkpoint"));
    }
    Ok((
        EngineState {
            sagd,
            rho,
            generation,
            states,
            held_out_states,
            held_out_visits,
            rho_history,
            kl_prev,
            force_line_search,
            calibrated,
            converged,
            diagnostics,
        },
        tag,
    ))
}

/// Writes to a sibling temporary file and renames it into place, so a
/// crash never leaves a partial checkpoint behind.
pub fn write_checkpoint(path: impl AsRef<Path>, state: &EngineState, tag: &str) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let bytes = encode_checkpoint(state, tag);
    fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(&bytes)?;
            f.sync_all()
        })
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(EngineState, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
