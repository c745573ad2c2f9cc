//! Synthetic phantoms and datasets drawn from the image formation model.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ctf::CtfParams;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fft;
use crate::geometry::{rotation_to_pose, Pose, Rotation};
use crate::imaging::Projector;
use crate::math::{stream_rng, streams};
use crate::volume::{DensityVolume, DiskLattice, ParticleImage};

/// Distribution of simulated viewing directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseDistribution {
    /// Haar measure on SO(3).
    Uniform,
    /// Beam directions restricted to `|latitude| ≤ max_latitude` (radians),
    /// uniform on that band, with a uniform in-plane angle.
    Equatorial { max_latitude: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub count: usize,
    /// Signal variance over the particle support divided by noise variance.
    /// `f64::INFINITY` disables noise.
    pub snr: f64,
    /// Standard deviation of each shift component in Å.
    pub sigma_t: f64,
    pub defocus_min: f64,
    pub defocus_max: f64,
    pub cs_mm: f64,
    pub kv: f64,
    pub amp_contrast: f64,
    pub bfactor: f64,
    /// When false every image uses the identity CTF.
    pub ctf: bool,
    /// Radius in Å of the disk over which signal variance is measured.
    pub support_radius: f64,
    pub poses: PoseDistribution,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(count: usize, snr: f64, support_radius: f64, seed: u64) -> Self {
        Self {
            count,
            snr,
            sigma_t: 0.0,
            defocus_min: 10_000.0,
            defocus_max: 25_000.0,
            cs_mm: 2.7,
            kv: 300.0,
            amp_contrast: 0.07,
            bfactor: 0.0,
            ctf: true,
            support_radius,
            poses: PoseDistribution::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("image count must be at least 1".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidArgument(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.sigma_t >= 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_t must be >= 0, got {}", self.sigma_t)));
        }
        if !(self.defocus_min > 0.0 && self.defocus_min <= self.defocus_max) {
            return Err(Error::InvalidArgument(format!(
                "defocus range [{}, {}] is invalid",
                self.defocus_min, self.defocus_max
            )));
        }
        if !(self.support_radius > 0.0) {
            return Err(Error::InvalidArgument("support radius must be positive".into()));
        }
        if self.ctf {
            CtfParams::new(self.defocus_min, self.cs_mm, self.kv, self.amp_contrast, self.bfactor)?;
        }
        Ok(())
    }
}

/// Ground-truth latent variables of one simulated image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub index: usize,
    /// `(w, x, y, z)` of the unit quaternion of the pose rotation.
    pub quaternion: [f64; 4],
    pub shift: [f64; 2],
    pub defocus: f64,
}

impl TruthRecord {
    pub fn rotation(&self) -> Rotation {
        let [w, x, y, z] = self.quaternion;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: Vec<TruthRecord>,
    pub noise_sigma: f64,
    pub signal_variance: f64,
}

/// Haar-uniform unit quaternion from four normal deviates.
pub fn uniform_quaternion<R: Rng>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        }
    }
}

pub fn uniform_so3_sample<R: Rng>(rng: &mut R) -> Pose {
    let r = uniform_quaternion(rng).to_rotation_matrix().into_inner();
    rotation_to_pose(&r, [0.0, 0.0])
}

fn equatorial_quaternion<R: Rng>(rng: &mut R, max_latitude: f64) -> UnitQuaternion<f64> {
    let s = max_latitude.sin();
    let z: f64 = rng.random_range(-s..=s);
    let phi = rng.random_range(0.0..2.0 * PI);
    let rxy = (1.0 - z * z).sqrt();
    let d = Vector3::new(rxy * phi.cos(), rxy * phi.sin(), z);
    let psi = rng.random_range(0.0..2.0 * PI);
    let r = crate::geometry::orientation_matrix(&d, psi);
    UnitQuaternion::from_matrix(&r)
}

fn support_radius_default(n: usize, voxel_size: f64) -> f64 {
    0.35 * n as f64 * voxel_size
}

/// Sum of unit-density balls with random centres and radii, all contained in
/// the centred sphere of radius `0.35·N·voxel_size`.
pub fn phantom_spheres(n: usize, voxel_size: f64, sphere_count: usize, seed: u64) -> Result<DensityVolume> {
    if sphere_count == 0 {
        return Err(Error::InvalidArgument("sphere count must be at least 1".into()));
    }
    let balls = random_balls(n, voxel_size, sphere_count, &mut stream_rng(seed, streams::INIT, 0, 0));
    Ok(render_balls(n, voxel_size, &balls))
}

/// `(centre, radius)` pairs in Å.
pub fn random_balls(n: usize, voxel_size: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<([f64; 3], f64)> {
    let support = support_radius_default(n, voxel_size);
    (0..count)
        .map(|_| {
            let r = rng.random_range(0.12..0.35) * support;
            let reach = support - r;
            let c = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-reach..=reach));
                if c.iter().map(|v| v * v).sum::<f64>() <= reach * reach {
                    break c;
                }
            };
            (c, r)
        })
        .collect()
}

/// Voxelizes balls by point sampling at voxel centres.
pub fn render_balls(n: usize, voxel_size: f64, balls: &[([f64; 3], f64)]) -> DensityVolume {
    DensityVolume::from_fn(n, voxel_size, |x, y, z| {
        let (x, y, z) = (x * voxel_size, y * voxel_size, z * voxel_size);
        balls
            .iter()
            .filter(|(c, r)| (x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2) <= r * r)
            .count() as f64
    })
    .expect("validated grid")
}

/// Shapes available for [`phantom_geometric`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometricKind {
    /// Smooth Gaussian lobes of unequal size and weight.
    Lobes,
    /// Hard-edged ellipsoids and a rod.
    Blocks,
}

impl std::str::FromStr for GeometricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lobes" => Ok(GeometricKind::Lobes),
            "blocks" => Ok(GeometricKind::Blocks),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind '{other}'"))),
        }
    }
}

// (x, y, z, width, weight) in units of the support radius
const LOBES: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.32, 1.0],
    [0.55, 0.1, 0.0, 0.2, 0.8],
    [-0.2, 0.55, 0.25, 0.17, 0.9],
    [-0.1, -0.35, 0.55, 0.14, 0.7],
    [0.25, -0.3, -0.5, 0.19, 0.6],
    [-0.55, -0.1, -0.2, 0.12, 1.0],
];

/// Deterministic asymmetric phantom; the seed jitters lobe positions.
pub fn phantom_geometric(n: usize, voxel_size: f64, kind: GeometricKind, seed: u64) -> Result<DensityVolume> {
    let s = support_radius_default(n, voxel_size);
    let mut rng = stream_rng(seed, streams::INIT, 1, 0);
    let lobes: Vec<[f64; 5]> = LOBES
        .iter()
        .map(|l| {
            let mut l = *l;
            for c in l.iter_mut().take(3) {
                *c = (*c + rng.random_range(-0.03..0.03)) * s;
            }
            l[3] *= s;
            l
        })
        .collect();
    let v = match kind {
        GeometricKind::Lobes => DensityVolume::from_fn(n, voxel_size, |x, y, z| {
            let (x, y, z) = (x * voxel_size, y * voxel_size, z * voxel_size);
            lobes
                .iter()
                .map(|l| {
                    let d2 = (x - l[0]).powi(2) + (y - l[1]).powi(2) + (z - l[2]).powi(2);
                    l[4] * (-0.5 * d2 / (l[3] * l[3])).exp()
                })
                .sum()
        })?,
        GeometricKind::Blocks => DensityVolume::from_fn(n, voxel_size, |x, y, z| {
            let (x, y, z) = (x * voxel_size, y * voxel_size, z * voxel_size);
            let mut v = 0.0;
            for (i, l) in lobes.iter().enumerate() {
                // ellipsoid axes stretched differently per lobe
                let a = [1.6, 1.0, 0.7];
                let (dx, dy, dz) = (x - l[0], y - l[1], z - l[2]);
                let (dx, dy, dz) = match i % 3 {
                    0 => (dx, dy, dz),
                    1 => (dy, dz, dx),
                    _ => (dz, dx, dy),
                };
                let q = (dx / (a[0] * l[3])).powi(2) + (dy / (a[1] * l[3])).powi(2) + (dz / (a[2] * l[3])).powi(2);
                if q <= 1.0 {
                    v += l[4];
                }
            }
            // rod from the centre toward the first satellite
            let t = (x * 0.8 + y * 0.2) / 0.8246;
            let off2 = x * x + y * y + z * z - t * t;
            if (0.0..0.6 * s).contains(&t) && off2 <= (0.06 * s).powi(2) {
                v += 0.5;
            }
            v
        })?,
    };
    Ok(v)
}

fn disk_mask(n: usize, pixel_size: f64, radius: f64) -> Vec<bool> {
    let h = (n / 2) as f64;
    let r2 = (radius / pixel_size).powi(2);
    (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 - h, (i / n) as f64 - h);
            x * x + y * y <= r2
        })
        .collect()
}

/// Per-pixel variance of `data` over the masked pixels.
pub fn masked_variance(data: &[f64], mask: &[bool]) -> f64 {
    let vals: Vec<f64> = data.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

/// Noise-free projection of `vol` rendered at full Nyquist.
pub fn render_image(
    projector: &Projector,
    prepared: &crate::volume::FourierVolume,
    lattice: &std::sync::Arc<DiskLattice>,
    rot: &Rotation,
    shift: [f64; 2],
    ctf: &CtfParams,
) -> Result<Vec<f64>> {
    let img = projector.forward_model(prepared, rot, shift, ctf, lattice)?;
    Ok(fft::ifft2(&img))
}

/// Draws poses, shifts and defoci, renders the clean projections, then adds
/// white noise at the configured SNR. Truth is returned separately.
pub fn simulate_dataset(v_true: &DensityVolume, cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let n = v_true.n();
    let px = v_true.voxel_size();
    let projector = Projector::new(n, 4)?;
    let prepared = projector.prepare(v_true)?;
    let lattice = DiskLattice::new(n, px, 0.5 / px)?;
    let mask = disk_mask(n, px, cfg.support_radius);
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("support radius covers no pixels".into()));
    }

    let clean: Vec<(TruthRecord, CtfParams, Vec<f64>)> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, streams::SIMULATE, i as u64, 0);
            let q = match cfg.poses {
                PoseDistribution::Uniform => uniform_quaternion(&mut rng),
                PoseDistribution::Equatorial { max_latitude } => equatorial_quaternion(&mut rng, max_latitude),
            };
            let shift = if cfg.sigma_t > 0.0 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [a * cfg.sigma_t, b * cfg.sigma_t]
            } else {
                [0.0, 0.0]
            };
            let defocus = rng.random_range(cfg.defocus_min..=cfg.defocus_max);
            let ctf = if cfg.ctf {
                CtfParams::new(defocus, cfg.cs_mm, cfg.kv, cfg.amp_contrast, cfg.bfactor)?
            } else {
                CtfParams::identity()
            };
            let rot = q.to_rotation_matrix().into_inner();
            let data = render_image(&projector, &prepared, &lattice, &rot, shift, &ctf)?;
            let truth = TruthRecord {
                index: i,
                quaternion: [q.w, q.i, q.j, q.k],
                shift,
                defocus: if cfg.ctf { defocus } else { 0.0 },
            };
            Ok((truth, ctf, data))
        })
        .collect::<Result<_>>()?;

    let signal_variance =
        clean.iter().map(|(_, _, d)| masked_variance(d, &mask)).sum::<f64>() / clean.len() as f64;
    if !(signal_variance > 0.0) {
        return Err(Error::InvalidArgument("phantom projects to a constant image".into()));
    }
    let noisy = cfg.snr.is_finite();
    let noise_sigma = (signal_variance / cfg.snr).sqrt();
    // with noise disabled the nominal sigma is the signal standard deviation
    let nominal_sigma = if noisy { noise_sigma } else { signal_variance.sqrt() };

    let mut truth = Vec::with_capacity(clean.len());
    let images = clean
        .into_par_iter()
        .map(|(t, ctf, mut data)| {
            if noisy {
                let mut rng = stream_rng(cfg.seed, streams::SIMULATE, t.index as u64, 1);
                for v in data.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += noise_sigma * e;
                }
            }
            ParticleImage::new(n, px, data, ctf, nominal_sigma).map(|im| (t, im))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|(t, im)| {
            truth.push(t);
            im
        })
        .collect();
    Ok(Simulation {
        dataset: Dataset::new(images)?,
        truth,
        noise_sigma: if noisy { noise_sigma } else { 0.0 },
        signal_variance,
    })
}

/// Pearson correlation of two equally sized grids.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

/// Resamples `v` under rotation `r` (`out(x) = v(Rᵀx)`) with trilinear
/// interpolation; samples outside the box read as zero.
pub fn rotate_volume(v: &DensityVolume, r: &Rotation) -> DensityVolume {
    let n = v.n();
    let h = (n / 2) as f64;
    let rt = r.transpose();
    let mut out = vec![0.0; n * n * n];
    out.par_chunks_mut(n * n).enumerate().for_each(|(z, plane)| {
        for y in 0..n {
            for x in 0..n {
                let p = rt * Vector3::new(x as f64 - h, y as f64 - h, z as f64 - h);
                plane[y * n + x] = trilinear(v, p.x + h, p.y + h, p.z + h);
            }
        }
    });
    DensityVolume::from_vec(n, v.voxel_size(), out).expect("same shape")
}

fn trilinear(v: &DensityVolume, x: f64, y: f64, z: f64) -> f64 {
    let n = v.n() as i64;
    let (x0, y0, z0) = (x.floor() as i64, y.floor() as i64, z.floor() as i64);
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (xi, yi, zi) = (x0 + dx, y0 + dy, z0 + dz);
                if xi < 0 || yi < 0 || zi < 0 || xi >= n || yi >= n || zi >= n {
                    continue;
                }
                acc += wx * wy * wz * v.get(xi as usize, yi as usize, zi as usize);
            }
        }
    }
    acc
}
