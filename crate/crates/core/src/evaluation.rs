//! Held-out error metrics and optimizer diagnostics.
//!
//! The expected squared error of an image is the posterior mean of
//! `‖I − C S_t P_R V‖²` over the in-disk coefficients. RREMSE divides its
//! per-coefficient mean by the noise variance, so a model that explains
//! everything but the noise scores 1.

use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{orientation_matrix, Rotation};
use crate::imaging::Projector;
use crate::importance::{
    direction_distribution, is_marginal, sample_image, update_state, FactorKernel, ImportanceState, SchemeKernels,
};
use crate::likelihood::{pose_logliks, ObservedImage, ShiftTable, SliceSet, WeightedIndices};
use crate::math::{kl_divergence, stream_rng, streams};
use crate::quadrature::{DirectionSet, QuadratureScheme, ShiftPrior};
use crate::simulator::{correlation, rotate_volume};
use crate::volume::{DensityVolume, DiskLattice, FourierVolume, ParticleImage};

/// Above this many quadrature points held-out images are importance
/// sampled instead of summed exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 100_000;
/// Sample-budget scale used for metrics.
pub const EVAL_S0: f64 = 100.0;
/// Floor mixed into distributions before taking KL divergences.
pub const KL_FLOOR: f64 = 1e-6;

/// Expected squared error of one image and its marginal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmseEstimate {
    pub emse: f64,
    pub coefficients: usize,
    pub sigma: f64,
    pub log_marginal: f64,
    pub fraction_evaluated: f64,
    /// Set when every responsibility underflowed.
    pub flagged: bool,
}

impl EmseEstimate {
    /// `Ê² / (m σ²)`, the image's contribution to RREMSE².
    pub fn relative(&self) -> f64 {
        self.emse / (self.coefficients as f64 * self.sigma * self.sigma)
    }
}

fn estimate_from(obs: &ObservedImage, pll: &crate::likelihood::PoseLogLik, fraction: f64) -> EmseEstimate {
    let log_marginal = pll.log_marginal();
    let flagged = !log_marginal.is_finite();
    EmseEstimate {
        emse: if flagged { f64::NAN } else { pll.expected_sq_error() },
        coefficients: obs.image.data().len(),
        sigma: obs.sigma,
        log_marginal,
        fraction_evaluated: fraction,
        flagged,
    }
}

/// Exhaustive `Ê²` over the full scheme.
pub fn expected_mse_exact(obs: &ObservedImage, slices: &SliceSet, table: &ShiftTable, scheme: &QuadratureScheme) -> EmseEstimate {
    let pll = pose_logliks(
        obs,
        slices,
        table,
        WeightedIndices::all_orientations(scheme),
        WeightedIndices::exhaustive(&scheme.shifts.weights),
    );
    estimate_from(obs, &pll, 1.0)
}

/// Importance-sampled `Ê²` sharing the pose evaluations of the marginal.
pub fn expected_mse(
    obs: &ObservedImage,
    slices: &SliceSet,
    table: &ShiftTable,
    scheme: &QuadratureScheme,
    samples: &crate::importance::ImageSamples,
) -> EmseEstimate {
    let est = is_marginal(obs, slices, table, scheme, samples);
    estimate_from(obs, &est.pose_logliks, est.fraction_evaluated)
}

/// `sqrt(mean_i Ê²_i / (m_i σ_i²))`; flagged images are skipped.
pub fn rremse(estimates: &[EmseEstimate]) -> Result<f64> {
    let good: Vec<f64> = estimates.iter().filter(|e| !e.flagged).map(EmseEstimate::relative).collect();
    if good.is_empty() {
        return Err(Error::InvalidArgument("no usable test images".into()));
    }
    Ok((good.iter().sum::<f64>() / good.len() as f64).sqrt())
}

/// Held-out images with their own importance states.
#[derive(Clone, Debug)]
pub struct HeldOutSet {
    pub images: Vec<ParticleImage>,
    pub states: Vec<ImportanceState>,
    pub seed: u64,
    visits: u64,
}

impl HeldOutSet {
    pub fn new(images: Vec<ParticleImage>, generation: u64, seed: u64) -> Self {
        let states = vec![ImportanceState::new(generation); images.len()];
        Self {
            images,
            states,
            seed,
            visits: 0,
        }
    }

    pub fn restore(images: Vec<ParticleImage>, states: Vec<ImportanceState>, seed: u64, visits: u64) -> Self {
        Self {
            images,
            states,
            seed,
            visits,
        }
    }

    pub fn visits(&self) -> u64 {
        self.visits
    }

    /// Replaces the importance states after a scheme upgrade.
    pub fn migrate(&mut self, f: impl Fn(&ImportanceState) -> ImportanceState) {
        self.states = self.states.iter().map(f).collect();
    }

    /// Per-image `Ê²` for the prepared volume. `tau` keys the proposal
    /// schedule of the importance-sampled path.
    pub fn evaluate(
        &mut self,
        projector: &Projector,
        prepared: &FourierVolume,
        scheme: &QuadratureScheme,
        tau: u64,
    ) -> Result<Vec<EmseEstimate>> {
        let lattice = DiskLattice::new(scheme.n, scheme.voxel_size, scheme.rho)?;
        let table = ShiftTable::new(&scheme.shifts, &lattice);
        let observed: Vec<ObservedImage> = self
            .images
            .iter()
            .map(|p| ObservedImage::from_particle(p, &lattice))
            .collect::<Result<_>>()?;
        let points = scheme.orientation_count() * scheme.shift_count();
        self.visits += 1;
        if points <= EXHAUSTIVE_LIMIT {
            let slices = SliceSet::full(projector, prepared, scheme, &lattice);
            return Ok(observed
                .par_iter()
                .map(|obs| expected_mse_exact(obs, &slices, &table, scheme))
                .collect());
        }
        let kernels = SchemeKernels::new(scheme);
        let visit = self.visits;
        let samples = self
            .states
            .par_iter()
            .enumerate()
            .map(|(i, st)| {
                let mut rng = stream_rng(self.seed, streams::HELD_OUT, i as u64, visit);
                sample_image(st, scheme, &kernels, None, EVAL_S0, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut slices = SliceSet::new(scheme.orientation_count(), &lattice);
        let needed: Vec<usize> = samples.iter().flat_map(|s| s.orientations(scheme).indices).collect();
        slices.ensure(projector, prepared, scheme, &needed);
        let results: Vec<(EmseEstimate, ImportanceState)> = observed
            .par_iter()
            .zip(&samples)
            .zip(&self.states)
            .map(|((obs, s), st)| {
                let est = is_marginal(obs, &slices, &table, scheme, s);
                let e = estimate_from(obs, &est.pose_logliks, est.fraction_evaluated);
                (e, update_state(st, est.phi, tau))
            })
            .collect();
        let (out, states): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        self.states = states;
        Ok(out)
    }
}

/// Dataset mean of the per-image direction distributions.
pub fn direction_marginal_average(states: &[ImportanceState], kernel: &FactorKernel) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("no importance states".into()));
    }
    let m = kernel.len();
    let per_image: Vec<Vec<f64>> = states.par_iter().map(|s| direction_distribution(s, kernel)).collect();
    let mut sums = vec![0.0; m];
    for d in &per_image {
        sums.iter_mut().zip(d).for_each(|(x, y)| *x += y);
    }
    let total: f64 = sums.iter().sum();
    Ok(sums.into_iter().map(|v| v / total).collect())
}

/// Writes `(x, y, z, probability)` rows.
pub fn write_direction_csv<W: Write>(mut w: W, directions: &DirectionSet, probs: &[f64]) -> std::io::Result<()> {
    writeln!(w, "x,y,z,probability")?;
    for (d, p) in directions.points.iter().zip(probs) {
        writeln!(w, "{},{},{},{}", d.x, d.y, d.z, p)?;
    }
    Ok(())
}

/// `KL(curr ‖ prev)` after mixing both with a small uniform floor.
pub fn epoch_kl(prev: &[f64], curr: &[f64]) -> Result<f64> {
    if prev.len() != curr.len() || prev.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distributions have {} and {} entries",
            prev.len(),
            curr.len()
        )));
    }
    let floor = |p: &[f64]| -> Vec<f64> {
        let m = p.len() as f64;
        let s: f64 = p.iter().sum();
        p.iter().map(|v| (1.0 - KL_FLOOR) * v / s + KL_FLOOR / m).collect()
    };
    Ok(kl_divergence(&floor(curr), &floor(prev)).max(0.0))
}

/// Summary written by the `evaluate` command.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rho: f64,
    pub rremse: f64,
    pub per_image_emse: Vec<f64>,
    pub mean_fraction_evaluated: f64,
    pub direction_marginal: Vec<(Vector3<f64>, f64)>,
    pub epoch_kl: Vec<f64>,
}

pub const REPORT_VERSION: u32 = 1;

impl EvalReport {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# cryorecon evaluation report v{REPORT_VERSION}")?;
        writeln!(w, "rho = {}", self.rho)?;
        writeln!(w, "rremse = {}", self.rremse)?;
        writeln!(w, "test_images = {}", self.per_image_emse.len())?;
        writeln!(w, "mean_fraction_evaluated = {}", self.mean_fraction_evaluated)?;
        writeln!(w, "\n[per_image]\nindex,emse")?;
        for (i, e) in self.per_image_emse.iter().enumerate() {
            writeln!(w, "{i},{e}")?;
        }
        writeln!(w, "\n[direction_marginal]\nx,y,z,probability")?;
        for (d, p) in &self.direction_marginal {
            writeln!(w, "{},{},{},{}", d.x, d.y, d.z, p)?;
        }
        writeln!(w, "\n[epoch_kl]\nepoch,kl")?;
        for (i, k) in self.epoch_kl.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, k)?;
        }
        Ok(())
    }
}

/// Scores a finished volume on test images at band limit `rho`. Every
/// image is a first visit, so marginals are exhaustive and also yield the
/// per-image direction posteriors.
pub fn evaluate_volume(
    volume: &DensityVolume,
    images: &[ParticleImage],
    rho: f64,
    shift_sigma: f64,
    footprint: usize,
    epoch_kl: Vec<f64>,
) -> Result<EvalReport> {
    let (n, px) = (volume.n(), volume.voxel_size());
    if let Some(p) = images.iter().find(|p| p.n() != n || p.pixel_size() != px) {
        return Err(Error::InvalidArgument(format!(
            "image is {}px at {} Å, volume is {n}px at {px} Å",
            p.n(),
            p.pixel_size()
        )));
    }
    let scheme = QuadratureScheme::new(rho, n, px, ShiftPrior::new(shift_sigma))?;
    let projector = Projector::new(n, footprint)?;
    let prepared = projector.prepare(volume)?;
    let lattice = DiskLattice::new(n, px, rho)?;
    let table = ShiftTable::new(&scheme.shifts, &lattice);
    let kernels = SchemeKernels::new(&scheme);
    let slices = SliceSet::full(&projector, &prepared, &scheme, &lattice);
    let results = images
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let obs = ObservedImage::from_particle(p, &lattice)?;
            let fresh = ImportanceState::new(scheme.generation);
            let mut rng = stream_rng(0, streams::HELD_OUT, i as u64, 0);
            let s = sample_image(&fresh, &scheme, &kernels, None, EVAL_S0, &mut rng)?;
            let est = is_marginal(&obs, &slices, &table, &scheme, &s);
            let e = estimate_from(&obs, &est.pose_logliks, est.fraction_evaluated);
            Ok((e, update_state(&fresh, est.phi, 0)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimates, states): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let marginal = direction_marginal_average(&states, kernels.get(crate::importance::Factor::Direction))?;
    Ok(EvalReport {
        rho,
        rremse: rremse(&estimates)?,
        per_image_emse: estimates.iter().map(|e| e.emse).collect(),
        mean_fraction_evaluated: estimates.iter().map(|e| e.fraction_evaluated).sum::<f64>() / estimates.len() as f64,
        direction_marginal: scheme.directions.points.iter().copied().zip(marginal).collect(),
        epoch_kl,
    })
}

/// Best real-space correlation of `vol` with `reference` over a rotation
/// grid (directions × in-plane angles at `spacing`), including the mirror
/// image, followed by a local refinement around the best grid point.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub correlation: f64,
    pub rotation: Rotation,
    pub mirrored: bool,
}

pub fn mirror(v: &DensityVolume) -> DensityVolume {
    let n = v.n();
    let mut out = vec![0.0; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                // reflect x about the origin at index n/2
                let xm = (n - x) % n;
                out[(z * n + y) * n + xm] = v.get(x, y, z);
            }
        }
    }
    DensityVolume::from_vec(n, v.voxel_size(), out).expect("same shape")
}

pub fn align_to_reference(vol: &DensityVolume, reference: &DensityVolume, spacing: f64) -> Result<Alignment> {
    if vol.n() != reference.n() {
        return Err(Error::InvalidArgument("volumes differ in size".into()));
    }
    let count = ((4.0 * std::f64::consts::PI) / (spacing * spacing)).ceil() as usize;
    let dirs = DirectionSet::fibonacci(count.max(6), spacing);
    let inplane = build_inplane_for(spacing);
    let mut best: Option<Alignment> = None;
    for (mirrored, cand) in [(false, vol.clone()), (true, mirror(vol))] {
        let scored: Vec<(f64, Rotation)> = dirs
            .points
            .par_iter()
            .flat_map_iter(|d| {
                let cand = &cand;
                inplane.iter().map(move |&a| {
                    let r = orientation_matrix(d, a);
                    (correlation(rotate_volume(cand, &r).data(), reference.data()), r)
                })
            })
            .collect();
        let (c, r) = scored
            .into_iter()
            .fold((f64::NEG_INFINITY, Rotation::identity()), |a, b| if b.0 > a.0 { b } else { a });
        if best.as_ref().is_none_or(|b| c > b.correlation) {
            best = Some(Alignment {
                correlation: c,
                rotation: r,
                mirrored,
            });
        }
    }
    let mut best = best.expect("two candidates");
    let cand = if best.mirrored { mirror(vol) } else { vol.clone() };
    refine(&cand, reference, &mut best, spacing);
    Ok(best)
}

fn build_inplane_for(spacing: f64) -> Vec<f64> {
    let m = (2.0 * std::f64::consts::PI / spacing).ceil() as usize;
    (0..m).map(|i| i as f64 * 2.0 * std::f64::consts::PI / m as f64).collect()
}

fn small_rotation(axis: usize, angle: f64) -> Rotation {
    let mut a = Vector3::zeros();
    a[axis] = angle;
    nalgebra::Rotation3::new(a).into_inner()
}

// coordinate descent over small rotations about the three axes
fn refine(cand: &DensityVolume, reference: &DensityVolume, best: &mut Alignment, spacing: f64) {
    let mut step = spacing / 2.0;
    while step > spacing / 16.0 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let r = small_rotation(axis, sign * step) * best.rotation;
                let c = correlation(rotate_volume(cand, &r).data(), reference.data());
                if c > best.correlation {
                    best.correlation = c;
                    best.rotation = r;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
}

/// Mean density outside a centred sphere of `radius` Å.
pub fn mean_outside_support(v: &DensityVolume, radius: f64) -> f64 {
    let n = v.n();
    let h = (n / 2) as f64;
    let r2 = (radius / v.voxel_size()).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - h).powi(2) + (y as f64 - h).powi(2) + (z as f64 - h).powi(2);
                if d2 > r2 {
                    sum += v.get(x, y, z);
                    count += 1;
                }
            }
        }
    }
    sum / count.max(1) as f64
}

/// Observed image on the band of `scheme`.
pub fn observe(p: &ParticleImage, scheme: &QuadratureScheme) -> Result<ObservedImage> {
    let lattice: Arc<DiskLattice> = DiskLattice::new(scheme.n, scheme.voxel_size, scheme.rho)?;
    ObservedImage::from_particle(p, &lattice)
}
