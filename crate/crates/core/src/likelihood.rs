//! Per-image marginal likelihood over the quadrature, and its gradient.
//!
//! Everything is accumulated in the log domain. For orientation `j` and
//! shift `ℓ` the residual norm is expanded as
//! `‖I‖² − 2 Re⟨I, C S_ℓ P_j V⟩ + ‖C P_j V‖²` so that each section is
//! interpolated once and reused across all shifts.
//!
//! The Gaussian normalizer counts every in-disk coefficient with weight 1/2:
//! the pair `(k, −k)` carries one complex degree of freedom whose real and
//! imaginary parts each have variance `σ²/2`, and the DC term is real with
//! variance `σ²`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::fft;
use crate::geometry::Rotation;
use crate::imaging::{ctf_values, shift_phase, Projector};
use crate::math::log_sum_exp;
use crate::quadrature::{QuadratureScheme, ShiftSet};
use crate::volume::{DiskLattice, FourierImage, FourierVolume, ParticleImage};

/// Skip orientations whose total responsibility is below this when
/// accumulating gradients.
const MIN_RESPONSIBILITY: f64 = 1e-16;

/// Log normalizer of the complex Gaussian over `m` in-disk coefficients.
pub fn gaussian_log_norm(m: usize, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    -0.5 * (m as f64 - 1.0) * (PI * s2).ln() - 0.5 * (2.0 * PI * s2).ln()
}

/// An observed image prepared for likelihood evaluation.
#[derive(Clone, Debug)]
pub struct ObservedImage {
    pub image: FourierImage,
    pub ctf: Vec<f64>,
    pub sigma: f64,
    norm_sqr: f64,
    log_norm: f64,
}

impl ObservedImage {
    pub fn new(image: FourierImage, theta: &CtfParams, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let ctf = ctf_values(theta, image.lattice());
        let norm_sqr = image.norm_sqr();
        let log_norm = gaussian_log_norm(image.lattice().len(), sigma);
        Ok(Self {
            image,
            ctf,
            sigma,
            norm_sqr,
            log_norm,
        })
    }

    /// Transforms a particle image to the band limit `rho`, using the
    /// image's own CTF and noise level.
    pub fn from_particle(p: &ParticleImage, lattice: &Arc<DiskLattice>) -> Result<Self> {
        if p.n() != lattice.n() {
            return Err(Error::InvalidArgument("image and lattice sizes differ".into()));
        }
        Self::new(fft::fft2_on(p.data(), lattice), &p.ctf, p.noise_sigma)
    }

    pub fn lattice(&self) -> &Arc<DiskLattice> {
        self.image.lattice()
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }
}

/// Fourier phase factors for every shift of a set, on one lattice.
#[derive(Clone, Debug)]
pub struct ShiftTable {
    lattice: Arc<DiskLattice>,
    phases: Vec<Vec<Complex64>>,
    log_prior: Vec<f64>,
}

impl ShiftTable {
    pub fn new(shifts: &ShiftSet, lattice: &Arc<DiskLattice>) -> Self {
        let phases = shifts
            .points
            .iter()
            .map(|&t| lattice.freqs().iter().map(|f| shift_phase(f, t)).collect())
            .collect();
        Self {
            lattice: lattice.clone(),
            phases,
            log_prior: shifts.prior_values.iter().map(|p| p.ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn lattice(&self) -> &Arc<DiskLattice> {
        &self.lattice
    }
}

/// Distinct quadrature indices with log effective weights. For exhaustive
/// sums these are the quadrature weights; for importance sampling they carry
/// `multiplicity · w / (N q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedIndices {
    pub indices: Vec<usize>,
    pub log_weights: Vec<f64>,
}

impl WeightedIndices {
    pub fn exhaustive(weights: &[f64]) -> Self {
        Self {
            indices: (0..weights.len()).collect(),
            log_weights: weights.iter().map(|w| w.ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Orientation set formed by pairing every direction with every
    /// in-plane angle.
    pub fn orientations(scheme: &QuadratureScheme, dirs: &WeightedIndices, inplanes: &WeightedIndices) -> Self {
        let mut indices = Vec::with_capacity(dirs.len() * inplanes.len());
        let mut log_weights = Vec::with_capacity(dirs.len() * inplanes.len());
        for (&d, &lwd) in dirs.indices.iter().zip(&dirs.log_weights) {
            for (&a, &lwa) in inplanes.indices.iter().zip(&inplanes.log_weights) {
                indices.push(scheme.orientation_index(d, a));
                log_weights.push(lwd + lwa);
            }
        }
        Self { indices, log_weights }
    }

    pub fn all_orientations(scheme: &QuadratureScheme) -> Self {
        Self::orientations(
            scheme,
            &Self::exhaustive(&scheme.directions.weights),
            &Self::exhaustive(&scheme.inplanes.weights),
        )
    }
}

/// Central sections of one volume for a subset of the scheme's orientations.
#[derive(Clone, Debug)]
pub struct SliceSet {
    lattice: Arc<DiskLattice>,
    slices: Vec<Option<Vec<Complex64>>>,
}

impl SliceSet {
    pub fn new(orientation_count: usize, lattice: &Arc<DiskLattice>) -> Self {
        Self {
            lattice: lattice.clone(),
            slices: vec![None; orientation_count],
        }
    }

    /// Computes any missing sections among `indices`.
    pub fn ensure(
        &mut self,
        projector: &Projector,
        vol: &FourierVolume,
        scheme: &QuadratureScheme,
        indices: &[usize],
    ) {
        let mut missing: Vec<usize> = indices.iter().copied().filter(|&j| self.slices[j].is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        let lattice = &self.lattice;
        let fresh: Vec<(usize, Vec<Complex64>)> = missing
            .par_iter()
            .map(|&j| {
                let coords = projector.slice_coords(scheme.rotation(j), lattice);
                let mut out = vec![Complex64::new(0.0, 0.0); lattice.len()];
                projector.extract_into(vol, &coords, &mut out);
                (j, out)
            })
            .collect();
        for (j, s) in fresh {
            self.slices[j] = Some(s);
        }
    }

    pub fn full(projector: &Projector, vol: &FourierVolume, scheme: &QuadratureScheme, lattice: &Arc<DiskLattice>) -> Self {
        let mut s = Self::new(scheme.orientation_count(), lattice);
        let all: Vec<usize> = (0..scheme.orientation_count()).collect();
        s.ensure(projector, vol, scheme, &all);
        s
    }

    pub fn get(&self, j: usize) -> &[Complex64] {
        self.slices[j].as_deref().expect("section not computed")
    }

    pub fn lattice(&self) -> &Arc<DiskLattice> {
        &self.lattice
    }
}

/// Log `p_{j,ℓ}` (likelihood times shift prior) for a grid of sampled
/// orientations and shifts, plus the squared residual norms.
#[derive(Clone, Debug)]
pub struct PoseLogLik {
    pub orientations: WeightedIndices,
    pub shifts: WeightedIndices,
    /// Row-major, orientation by shift.
    pub log_p: Vec<f64>,
    pub resid2: Vec<f64>,
}

impl PoseLogLik {
    fn weighted(&self) -> Vec<f64> {
        let ns = self.shifts.len();
        let mut out = Vec::with_capacity(self.log_p.len());
        for (a, &lwj) in self.orientations.log_weights.iter().enumerate() {
            for (b, &lwl) in self.shifts.log_weights.iter().enumerate() {
                out.push(lwj + lwl + self.log_p[a * ns + b]);
            }
        }
        out
    }

    /// `log Σ_j w_j Σ_ℓ w_ℓ p_{j,ℓ}`.
    pub fn log_marginal(&self) -> f64 {
        log_sum_exp(&self.weighted())
    }

    /// Normalized `w_j w_ℓ p_{j,ℓ}`, row-major.
    pub fn responsibilities(&self) -> Vec<f64> {
        let lw = self.weighted();
        let z = log_sum_exp(&lw);
        lw.iter().map(|v| (v - z).exp()).collect()
    }

    /// `log φ_j = log Σ_ℓ w_ℓ p_{j,ℓ}` for each sampled orientation.
    pub fn orientation_log_phi(&self) -> Vec<f64> {
        let ns = self.shifts.len();
        let mut row = vec![0.0; ns];
        (0..self.orientations.len())
            .map(|a| {
                for b in 0..ns {
                    row[b] = self.shifts.log_weights[b] + self.log_p[a * ns + b];
                }
                log_sum_exp(&row)
            })
            .collect()
    }

    /// `log φ_ℓ = log Σ_j w_j p_{j,ℓ}` for each sampled shift.
    pub fn shift_log_phi(&self) -> Vec<f64> {
        let ns = self.shifts.len();
        let no = self.orientations.len();
        let mut col = vec![0.0; no];
        (0..ns)
            .map(|b| {
                for a in 0..no {
                    col[a] = self.orientations.log_weights[a] + self.log_p[a * ns + b];
                }
                log_sum_exp(&col)
            })
            .collect()
    }

    /// Posterior expectation of the squared residual norm.
    pub fn expected_sq_error(&self) -> f64 {
        let r = self.responsibilities();
        r.iter().zip(&self.resid2).map(|(a, b)| a * b).sum()
    }
}

/// Evaluates `log p_{j,ℓ}` over the product of the given orientation and
/// shift subsets.
pub fn pose_logliks(
    obs: &ObservedImage,
    slices: &SliceSet,
    table: &ShiftTable,
    orientations: WeightedIndices,
    shifts: WeightedIndices,
) -> PoseLogLik {
    let m = obs.image.data().len();
    let ns = shifts.len();
    let two_s2 = 2.0 * obs.sigma * obs.sigma;
    let mut log_p = Vec::with_capacity(orientations.len() * ns);
    let mut resid2 = Vec::with_capacity(orientations.len() * ns);
    let mut u = vec![Complex64::new(0.0, 0.0); m];
    for &j in &orientations.indices {
        let p = slices.get(j);
        let mut pp = 0.0;
        for k in 0..m {
            let a = p[k] * obs.ctf[k];
            pp += a.norm_sqr();
            u[k] = obs.image.data()[k].conj() * a;
        }
        for &l in &shifts.indices {
            let phase = &table.phases[l];
            let mut cross = 0.0;
            for k in 0..m {
                cross += u[k].re * phase[k].re - u[k].im * phase[k].im;
            }
            let r2 = (obs.norm_sqr - 2.0 * cross + pp).max(0.0);
            resid2.push(r2);
            log_p.push(-r2 / two_s2 + obs.log_norm + table.log_prior[l]);
        }
    }
    PoseLogLik {
        orientations,
        shifts,
        log_p,
        resid2,
    }
}

/// Image-space gradients summed per orientation, waiting to be
/// back-projected.
#[derive(Clone, Debug, Default)]
pub struct GradientAccumulator {
    per_orientation: BTreeMap<usize, Vec<Complex64>>,
}

impl GradientAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.per_orientation.is_empty()
    }

    pub fn len(&self) -> usize {
        self.per_orientation.len()
    }

    /// Adds `scale · ∂(−log marginal)/∂(sections)` for one image.
    pub fn add_image(&mut self, obs: &ObservedImage, pll: &PoseLogLik, slices: &SliceSet, table: &ShiftTable, scale: f64) {
        let r = pll.responsibilities();
        let m = obs.image.data().len();
        let ns = pll.shifts.len();
        let inv_s2 = scale / (obs.sigma * obs.sigma);
        let mut h = vec![Complex64::new(0.0, 0.0); m];
        for (a, &j) in pll.orientations.indices.iter().enumerate() {
            let row = &r[a * ns..(a + 1) * ns];
            let total: f64 = row.iter().sum();
            if total < MIN_RESPONSIBILITY {
                continue;
            }
            h.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for (b, &l) in pll.shifts.indices.iter().enumerate() {
                let rl = row[b];
                if rl == 0.0 {
                    continue;
                }
                for (hk, s) in h.iter_mut().zip(&table.phases[l]) {
                    *hk += s.conj() * rl;
                }
            }
            let p = slices.get(j);
            let g = self
                .per_orientation
                .entry(j)
                .or_insert_with(|| vec![Complex64::new(0.0, 0.0); m]);
            let img = obs.image.data();
            for k in 0..m {
                let c = obs.ctf[k];
                g[k] += (p[k] * (c * c * total) - img[k] * h[k] * c) * inv_s2;
            }
        }
    }

    /// Adds another accumulator's contents (for ordered reductions).
    pub fn merge(&mut self, other: GradientAccumulator) {
        for (j, g) in other.per_orientation {
            match self.per_orientation.get_mut(&j) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.per_orientation.insert(j, g);
                }
            }
        }
    }

    /// Back-projects every orientation's gradient into a Fourier-volume
    /// gradient. The orientation list is split into a fixed number of
    /// ordered chunks so the result does not depend on the thread count.
    pub fn backproject(&self, projector: &Projector, scheme: &QuadratureScheme, lattice: &Arc<DiskLattice>, voxel_size: f64) -> FourierVolume {
        const CHUNKS: usize = 8;
        let entries: Vec<(&usize, &Vec<Complex64>)> = self.per_orientation.iter().collect();
        let per = entries.len().div_ceil(CHUNKS).max(1);
        let partials: Vec<FourierVolume> = entries
            .par_chunks(per)
            .map(|chunk| {
                let mut acc = projector.zero_fourier(voxel_size);
                for (&j, g) in chunk {
                    let coords = projector.slice_coords(scheme.rotation(j), lattice);
                    projector.adjoint_into(g, &coords, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = projector.zero_fourier(voxel_size);
        for p in &partials {
            total.add_assign(p);
        }
        total
    }
}

fn check_band(scheme: &QuadratureScheme, lattice: &DiskLattice) -> Result<()> {
    if (scheme.rho - lattice.rho()).abs() > 1e-12 * scheme.rho || scheme.n != lattice.n() {
        return Err(Error::SchemeMismatch(format!(
            "scheme has rho={} N={}, image has rho={} N={}",
            scheme.rho,
            scheme.n,
            lattice.rho(),
            lattice.n()
        )));
    }
    Ok(())
}

/// Log-density of the image at a single pose, computed from the residual
/// directly.
#[allow(clippy::too_many_arguments)]
pub fn per_point_loglik(
    img: &FourierImage,
    theta: &CtfParams,
    rot: &Rotation,
    t: [f64; 2],
    vol: &FourierVolume,
    projector: &Projector,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let model = projector.forward_model(vol, rot, t, theta, img.lattice())?;
    let r2 = img.sub(&model).norm_sqr();
    Ok(-r2 / (2.0 * sigma * sigma) + gaussian_log_norm(img.lattice().len(), sigma))
}

/// Result of an exhaustive quadrature sum.
#[derive(Clone, Debug)]
pub struct ExactMarginal {
    pub log_marginal: f64,
    /// Normalized `log φ_j` over all orientations.
    pub phi_r: Vec<f64>,
    /// Normalized `log φ_ℓ` over all shifts.
    pub phi_t: Vec<f64>,
    pub pose_logliks: PoseLogLik,
}

fn normalized_log(v: Vec<f64>) -> Vec<f64> {
    let z = log_sum_exp(&v);
    v.into_iter().map(|x| x - z).collect()
}

fn exhaustive_logliks(
    obs: &ObservedImage,
    vol: &FourierVolume,
    projector: &Projector,
    scheme: &QuadratureScheme,
) -> Result<(PoseLogLik, SliceSet, ShiftTable)> {
    check_band(scheme, obs.lattice())?;
    let slices = SliceSet::full(projector, vol, scheme, obs.lattice());
    let table = ShiftTable::new(&scheme.shifts, obs.lattice());
    let pll = pose_logliks(
        obs,
        &slices,
        &table,
        WeightedIndices::all_orientations(scheme),
        WeightedIndices::exhaustive(&scheme.shifts.weights),
    );
    Ok((pll, slices, table))
}

/// `log Σ_j w_j Σ_ℓ w_ℓ p_{j,ℓ}` over the full scheme.
pub fn exact_marginal(
    obs: &ObservedImage,
    vol: &FourierVolume,
    projector: &Projector,
    scheme: &QuadratureScheme,
) -> Result<ExactMarginal> {
    let (pll, _, _) = exhaustive_logliks(obs, vol, projector, scheme)?;
    Ok(ExactMarginal {
        log_marginal: pll.log_marginal(),
        phi_r: normalized_log(pll.orientation_log_phi()),
        phi_t: normalized_log(pll.shift_log_phi()),
        pose_logliks: pll,
    })
}

/// Gradient of `−log marginal` with respect to the Fourier coefficients
/// (`∂/∂Re + i ∂/∂Im`).
pub fn marginal_gradient_fourier(
    obs: &ObservedImage,
    vol: &FourierVolume,
    projector: &Projector,
    scheme: &QuadratureScheme,
) -> Result<FourierVolume> {
    let (pll, slices, table) = exhaustive_logliks(obs, vol, projector, scheme)?;
    let mut acc = GradientAccumulator::new();
    acc.add_image(obs, &pll, &slices, &table, 1.0);
    Ok(acc.backproject(projector, scheme, obs.lattice(), vol.voxel_size()))
}

/// Gradient of `−log marginal` with respect to the real density voxels.
pub fn marginal_gradient(
    obs: &ObservedImage,
    vol: &FourierVolume,
    projector: &Projector,
    scheme: &QuadratureScheme,
) -> Result<Vec<f64>> {
    projector.prepare_adjoint(&marginal_gradient_fourier(obs, vol, projector, scheme)?)
}

/// Standard deviation of the pixels outside a centered disk.
pub fn estimate_noise_sigma(img: &ParticleImage, particle_radius: f64) -> Result<f64> {
    let n = img.n();
    let h = (n / 2) as f64;
    let px = img.pixel_size();
    let r2 = (particle_radius / px).powi(2);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut count = 0usize;
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - h, y as f64 - h);
            if dx * dx + dy * dy > r2 {
                let v = img.data()[y * n + x];
                sum += v;
                sum2 += v * v;
                count += 1;
            }
        }
    }
    if count < 2 {
        return Err(Error::EmptyBoundary {
            radius: particle_radius,
        });
    }
    let mean = sum / count as f64;
    Ok((sum2 / count as f64 - mean * mean).max(0.0).sqrt())
}
