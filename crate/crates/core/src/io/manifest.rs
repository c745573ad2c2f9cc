//! Dataset manifests, particle stacks and ground-truth sidecars.
//!
//! A manifest is a `key = value` file:
//!
//! ```text
//! stack = particles.mrcs
//! ctf = ctf.csv            # optional; absent means no CTF
//! noise_sigma = 4.2        # optional; estimated from image borders otherwise
//! particle_radius = 48     # Å, used by the noise estimate
//! truth = truth.csv        # optional
//! seed = 7
//! n = 64                   # optional checks against the stack
//! count = 2000
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ctf::CtfParams;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::estimate_noise_sigma;
use crate::simulator::TruthRecord;
use crate::volume::ParticleImage;

use super::config::KeyValues;
use super::ctf_table::read_ctf_table;
use super::mrc::{read_mrc, write_mrc, MrcFile};

const KEYS: [&str; 10] = [
    "stack",
    "ctf",
    "noise_sigma",
    "particle_radius",
    "truth",
    "seed",
    "pixel_size",
    "n",
    "count",
    "streams",
];

/// Named random sub-streams derived from the top-level seed.
pub fn stream_names() -> String {
    use crate::math::streams::*;
    format!("simulate={SIMULATE},batch_order={BATCH_ORDER},importance={IMPORTANCE},init={INIT},held_out={HELD_OUT}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub stack: PathBuf,
    pub ctf: Option<PathBuf>,
    pub noise_sigma: Option<f64>,
    pub particle_radius: Option<f64>,
    pub truth: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Overrides the pixel size stored in the stack header.
    pub pixel_size: Option<f64>,
    /// Expected box size and image count, checked at load.
    pub n: Option<usize>,
    pub count: Option<usize>,
}

impl DatasetManifest {
    pub fn new(stack: impl Into<PathBuf>) -> Self {
        Self {
            stack: stack.into(),
            ctf: None,
            noise_sigma: None,
            particle_radius: None,
            truth: None,
            seed: None,
            pixel_size: None,
            n: None,
            count: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let kv = KeyValues::read(path)?;
        kv.check_known(&KEYS)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: String| base.join(p);
        let positive = |key: &str| -> Result<Option<f64>> {
            match kv.get_f64(key, false)? {
                Some(v) if v <= 0.0 => Err(Error::format(path, format!("key '{key}' must be positive, got {v}"))),
                v => Ok(v),
            }
        };
        Ok(Self {
            stack: resolve(kv.require::<String>("stack")?),
            ctf: kv.get::<String>("ctf")?.map(resolve),
            noise_sigma: positive("noise_sigma")?,
            particle_radius: positive("particle_radius")?,
            truth: kv.get::<String>("truth")?.map(resolve),
            seed: kv.get("seed")?,
            pixel_size: positive("pixel_size")?,
            n: kv.get("n")?,
            count: kv.get("count")?,
        })
    }

    /// Writes the manifest with paths relative to its own directory when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut kv = KeyValues::new();
        kv.set("stack", rel(&self.stack));
        if let Some(c) = &self.ctf {
            kv.set("ctf", rel(c));
        }
        if let Some(t) = &self.truth {
            kv.set("truth", rel(t));
        }
        if let Some(s) = self.noise_sigma {
            kv.set("noise_sigma", format!("{s:e}"));
        }
        if let Some(r) = self.particle_radius {
            kv.set("particle_radius", r.to_string());
        }
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
            kv.set("streams", stream_names());
        }
        if let Some(n) = self.n {
            kv.set("n", n.to_string());
        }
        if let Some(k) = self.count {
            kv.set("count", k.to_string());
        }
        if let Some(p) = self.pixel_size {
            kv.set("pixel_size", p.to_string());
        }
        kv.write(path)
    }

    pub fn load(&self) -> Result<Dataset> {
        let stack = read_mrc(&self.stack)?;
        if stack.nx != stack.ny {
            return Err(Error::format(
                &self.stack,
                format!("images are {}x{}, expected square", stack.nx, stack.ny),
            ));
        }
        let (n, count) = (stack.nx, stack.nz);
        if self.n.is_some_and(|want| want != n) || self.count.is_some_and(|want| want != count) {
            return Err(Error::format(
                &self.stack,
                format!(
                    "stack holds {count} images of {n}px, manifest expects {} of {}px",
                    self.count.map_or("any".into(), |k| k.to_string()),
                    self.n.map_or("any".into(), |k| k.to_string())
                ),
            ));
        }
        let px = self.pixel_size.unwrap_or_else(|| stack.voxel_size());
        if !(px.is_finite() && px > 0.0) {
            return Err(Error::format(&self.stack, format!("pixel size {px} from header is not positive")));
        }
        let ctfs = match &self.ctf {
            Some(p) => {
                let t = read_ctf_table(p)?;
                if t.len() != count {
                    return Err(Error::format(p, format!("{} rows for a stack of {count} images", t.len())));
                }
                t
            }
            None => vec![CtfParams::identity(); count],
        };
        let pixels = |i: usize| stack.data[i * n * n..(i + 1) * n * n].iter().map(|&v| v as f64).collect::<Vec<_>>();
        let sigma = match self.noise_sigma {
            Some(s) => s,
            None => {
                let radius = self.particle_radius.unwrap_or(0.35 * n as f64 * px);
                let mut sum = 0.0;
                for i in 0..count {
                    let img = ParticleImage::new(n, px, pixels(i), ctfs[i], 1.0)?;
                    sum += estimate_noise_sigma(&img, radius)?.powi(2);
                }
                let s = (sum / count as f64).sqrt();
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::format(
                        &self.stack,
                        "noise level estimated from the image borders is zero; set noise_sigma",
                    ));
                }
                s
            }
        };
        let images = (0..count)
            .map(|i| ParticleImage::new(n, px, pixels(i), ctfs[i], sigma))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(images)
    }
}

pub fn write_stack(path: impl AsRef<Path>, images: &[ParticleImage]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty stack".into()))?;
    let (n, px) = (first.n(), first.pixel_size());
    let data = images.iter().flat_map(|im| im.data().iter().map(|&v| v as f32)).collect();
    let side = (n as f64 * px) as f32;
    let m = MrcFile::new(n, n, images.len(), [side, side, images.len() as f32 * px as f32], data)?;
    write_mrc(path, &m)
}

pub const TRUTH_HEADER: &str = "index,qw,qx,qy,qz,shift_x_A,shift_y_A,defocus_A";

pub fn write_truth(path: impl AsRef<Path>, truth: &[TruthRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(TRUTH_HEADER);
    out.push('\n');
    for t in truth {
        let [w, x, y, z] = t.quaternion;
        writeln!(out, "{},{w},{x},{y},{z},{},{},{}", t.index, t.shift[0], t.shift[1], t.defocus)
            .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != TRUTH_HEADER {
        return Err(Error::format(path, format!("line 1: expected header '{TRUTH_HEADER}'")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("line {line}: '{}' is not a number", &rec[i])))
        };
        out.push(TruthRecord {
            index: rec[0]
                .parse()
                .map_err(|_| Error::format(path, format!("line {line}: bad index '{}'", &rec[0])))?,
            quaternion: [num(1)?, num(2)?, num(3)?, num(4)?],
            shift: [num(5)?, num(6)?],
            defocus: num(7)?,
        });
    }
    Ok(out)
}
