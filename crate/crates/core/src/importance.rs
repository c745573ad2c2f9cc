//! Factored importance sampling over directions, in-plane angles and shifts.
//!
//! Each image keeps, per factor, the indices it evaluated last time it was
//! seen and the corresponding `log φ` values. The next proposal is
//!
//! ```text
//! q_j = (1 − α) φ̂_j / Z + α ψ_j,    φ̂_j = Σ_i φ_i^{1/T} K(i, j)
//! ```
//!
//! with `α` and `T` set from the iteration the image was last visited.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use nalgebra::Vector3;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::likelihood::{pose_logliks, ObservedImage, PoseLogLik, ShiftTable, SliceSet, WeightedIndices};
use crate::math::{log_add, log_sum_exp};
use crate::quadrature::{Correspondence, QuadratureScheme};

/// Default sample-budget scale.
pub const DEFAULT_S0: f64 = 10.0;

/// Von Mises-Fisher kernel normalized so that `K(d, d) = 1`.
pub fn kernel_vmf(di: &Vector3<f64>, dj: &Vector3<f64>, kappa: f64) -> f64 {
    (kappa * (di.dot(dj) - 1.0)).exp()
}

/// Isotropic Gaussian kernel on shifts.
pub fn kernel_gauss(ti: [f64; 2], tj: [f64; 2], kappa: f64) -> f64 {
    (-kappa * ((ti[0] - tj[0]).powi(2) + (ti[1] - tj[1]).powi(2))).exp()
}

/// Concentration giving `K = 1/2` at angular distance `spacing`.
pub fn vmf_kappa(spacing: f64) -> f64 {
    LN_2 / (1.0 - spacing.cos())
}

/// Precision giving `K = 1/2` at distance `spacing`.
pub fn gauss_kappa(spacing: f64) -> f64 {
    LN_2 / (spacing * spacing)
}

/// `α = max(0.05, 2^(−0.25 ⌊τ/50⌋))`.
pub fn alpha_schedule(tau_prev: u64) -> f64 {
    0.05f64.max(2f64.powf(-0.25 * (tau_prev / 50) as f64))
}

/// `T = max(1.25, 2^(10 / ⌊τ/50⌋))`, or `None` (infinite temperature)
/// while `⌊τ/50⌋ = 0`.
pub fn temperature_schedule(tau_prev: u64) -> Option<f64> {
    let k = tau_prev / 50;
    if k == 0 {
        None
    } else {
        Some(1.25f64.max(2f64.powf(10.0 / k as f64)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Factor {
    Direction,
    Inplane,
    Shift,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Direction, Factor::Inplane, Factor::Shift];
}

/// Kernel over the points of one factor.
#[derive(Clone, Debug)]
pub enum FactorKernel {
    Sphere { points: Vec<Vector3<f64>>, kappa: f64 },
    Circle { angles: Vec<f64>, kappa: f64 },
    Plane { points: Vec<[f64; 2]>, kappa: f64 },
}

impl FactorKernel {
    pub fn for_factor(scheme: &QuadratureScheme, factor: Factor) -> Self {
        match factor {
            Factor::Direction => FactorKernel::Sphere {
                points: scheme.directions.points.clone(),
                kappa: vmf_kappa(scheme.directions.angular_spacing),
            },
            Factor::Inplane => FactorKernel::Circle {
                angles: scheme.inplanes.angles.clone(),
                kappa: vmf_kappa(scheme.inplanes.spacing()),
            },
            Factor::Shift => {
                let sp = scheme.shifts.spacing;
                FactorKernel::Plane {
                    points: scheme.shifts.points.clone(),
                    kappa: if sp > 0.0 { gauss_kappa(sp) } else { 1.0 },
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FactorKernel::Sphere { points, .. } => points.len(),
            FactorKernel::Circle { angles, .. } => angles.len(),
            FactorKernel::Plane { points, .. } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_k(&self, i: usize, j: usize) -> f64 {
        match self {
            FactorKernel::Sphere { points, kappa } => kappa * (points[i].dot(&points[j]) - 1.0),
            FactorKernel::Circle { angles, kappa } => kappa * ((angles[i] - angles[j]).cos() - 1.0),
            FactorKernel::Plane { points, kappa } => {
                let (a, b) = (points[i], points[j]);
                -kappa * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            }
        }
    }
}

/// Kernels for all three factors of a scheme.
#[derive(Clone, Debug)]
pub struct SchemeKernels {
    pub generation: u64,
    kernels: [FactorKernel; 3],
}

impl SchemeKernels {
    pub fn new(scheme: &QuadratureScheme) -> Self {
        Self {
            generation: scheme.generation,
            kernels: Factor::ALL.map(|f| FactorKernel::for_factor(scheme, f)),
        }
    }

    pub fn get(&self, f: Factor) -> &FactorKernel {
        &self.kernels[f as usize]
    }
}

/// Stored sampled indices and their `log φ` for one factor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorState {
    pub indices: Vec<usize>,
    pub log_phi: Vec<f64>,
}

impl FactorState {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-image importance state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceState {
    pub factors: [FactorState; 3],
    pub last_seen: Option<u64>,
    pub generation: u64,
}

impl ImportanceState {
    pub fn new(generation: u64) -> Self {
        Self {
            generation,
            ..Default::default()
        }
    }

    pub fn factor(&self, f: Factor) -> &FactorState {
        &self.factors[f as usize]
    }

    pub fn check_generation(&self, generation: u64) -> Result<()> {
        if self.last_seen.is_some() && self.generation != generation {
            return Err(Error::StaleImportanceState {
                state: self.generation,
                scheme: generation,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDistribution {
    pub q: Vec<f64>,
    pub budget: usize,
    pub alpha: f64,
    /// `None` stands for infinite temperature.
    pub temperature: Option<f64>,
    /// True on the first visit, when every point is evaluated once.
    pub first_visit: bool,
}

fn uniform(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// Builds `q` for one factor from the previous visit. `psi` defaults to
/// uniform. `alpha_override` replaces the schedule (used by tests and
/// diagnostics).
pub fn build_importance(
    prev: &FactorState,
    kernel: &FactorKernel,
    tau_prev: Option<u64>,
    psi: Option<&[f64]>,
    s0: f64,
    alpha_override: Option<f64>,
) -> Result<ImportanceDistribution> {
    let m = kernel.len();
    let psi_vec = match psi {
        Some(p) => {
            if p.len() != m {
                return Err(Error::InvalidArgument(format!("psi has {} entries, factor has {m}", p.len())));
            }
            p.to_vec()
        }
        None => uniform(m),
    };
    if prev.indices.iter().any(|&i| i >= m) {
        return Err(Error::SchemeMismatch("stored index outside the current factor".into()));
    }
    let tau = match tau_prev {
        Some(t) if !prev.is_empty() => t,
        _ => {
            return Ok(ImportanceDistribution {
                budget: m,
                q: psi_vec,
                alpha: 1.0,
                temperature: None,
                first_visit: true,
            })
        }
    };
    let alpha = alpha_override.unwrap_or_else(|| alpha_schedule(tau));
    let temperature = temperature_schedule(tau);
    let q = match temperature {
        Some(t) if alpha < 1.0 => {
            let mut log_hat = vec![f64::NEG_INFINITY; m];
            let scaled: Vec<f64> = prev.log_phi.iter().map(|v| v / t).collect();
            let shift = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut terms = vec![0.0; prev.indices.len()];
            for (j, lh) in log_hat.iter_mut().enumerate() {
                for (k, &i) in prev.indices.iter().enumerate() {
                    terms[k] = scaled[k] - shift + kernel.log_k(i, j);
                }
                *lh = log_sum_exp(&terms);
            }
            let z = log_sum_exp(&log_hat);
            log_hat
                .iter()
                .zip(&psi_vec)
                .map(|(lh, p)| (1.0 - alpha) * (lh - z).exp() + alpha * p)
                .collect()
        }
        _ => psi_vec,
    };
    let budget = sample_budget(&q, s0);
    Ok(ImportanceDistribution {
        q,
        budget,
        alpha,
        temperature,
        first_visit: false,
    })
}

/// Effective sample size `1 / Σ q²`.
pub fn ess(q: &[f64]) -> f64 {
    1.0 / q.iter().map(|v| v * v).sum::<f64>()
}

/// `ceil(s0 · ess(q))` clamped to `[1, M]`.
pub fn sample_budget(q: &[f64], s0: f64) -> usize {
    let n = (s0 * ess(q)).ceil();
    if n.is_nan() {
        return q.len().max(1);
    }
    (n as usize).clamp(1, q.len().max(1))
}

/// Draws the sample set for one factor and returns the distinct indices
/// with their effective log weights `log(m_j w_j / (N q_j))`. A budget equal
/// to the number of points enumerates every point once with its quadrature
/// weight.
pub fn draw_factor<R: Rng>(dist: &ImportanceDistribution, weights: &[f64], rng: &mut R) -> WeightedIndices {
    let m = weights.len();
    if dist.first_visit || dist.budget >= m {
        return WeightedIndices::exhaustive(weights);
    }
    let sampler = WeightedIndex::new(&dist.q).expect("valid importance distribution");
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..dist.budget {
        *counts.entry(sampler.sample(rng)).or_insert(0) += 1;
    }
    let n = dist.budget as f64;
    let mut indices = Vec::with_capacity(counts.len());
    let mut log_weights = Vec::with_capacity(counts.len());
    for (j, c) in counts {
        indices.push(j);
        log_weights.push((c as f64 * weights[j] / (n * dist.q[j])).ln());
    }
    WeightedIndices { indices, log_weights }
}

/// Proposals and draws for all three factors of one image.
#[derive(Clone, Debug)]
pub struct ImageSamples {
    pub directions: WeightedIndices,
    pub inplanes: WeightedIndices,
    pub shifts: WeightedIndices,
    pub distributions: [ImportanceDistribution; 3],
}

impl ImageSamples {
    pub fn orientations(&self, scheme: &QuadratureScheme) -> WeightedIndices {
        WeightedIndices::orientations(scheme, &self.directions, &self.inplanes)
    }

    /// Fraction of the `M_R · M_t` quadrature points evaluated.
    pub fn fraction_evaluated(&self, scheme: &QuadratureScheme) -> f64 {
        (self.directions.len() * self.inplanes.len() * self.shifts.len()) as f64
            / (scheme.orientation_count() * scheme.shift_count()) as f64
    }
}

/// Builds the three proposals for an image and samples from them.
pub fn sample_image<R: Rng>(
    state: &ImportanceState,
    scheme: &QuadratureScheme,
    kernels: &SchemeKernels,
    direction_psi: Option<&[f64]>,
    s0: f64,
    rng: &mut R,
) -> Result<ImageSamples> {
    state.check_generation(scheme.generation)?;
    if kernels.generation != scheme.generation {
        return Err(Error::SchemeMismatch("kernels built for another scheme generation".into()));
    }
    let dists = [
        build_importance(state.factor(Factor::Direction), kernels.get(Factor::Direction), state.last_seen, direction_psi, s0, None)?,
        build_importance(state.factor(Factor::Inplane), kernels.get(Factor::Inplane), state.last_seen, None, s0, None)?,
        build_importance(state.factor(Factor::Shift), kernels.get(Factor::Shift), state.last_seen, None, s0, None)?,
    ];
    let directions = draw_factor(&dists[0], &scheme.directions.weights, rng);
    let inplanes = draw_factor(&dists[1], &scheme.inplanes.weights, rng);
    let shifts = draw_factor(&dists[2], &scheme.shifts.weights, rng);
    Ok(ImageSamples {
        directions,
        inplanes,
        shifts,
        distributions: dists,
    })
}

/// `log φ` for each sampled index of every factor.
pub fn sampled_phi(pll: &PoseLogLik, samples: &ImageSamples) -> [FactorState; 3] {
    let orient_phi = pll.orientation_log_phi();
    let na = samples.inplanes.len();
    let dirs = &samples.directions;
    let inps = &samples.inplanes;
    let dir_phi = (0..dirs.len())
        .map(|d| {
            let terms: Vec<f64> = (0..na).map(|a| inps.log_weights[a] + orient_phi[d * na + a]).collect();
            log_sum_exp(&terms)
        })
        .collect();
    let inp_phi = (0..na)
        .map(|a| {
            let terms: Vec<f64> = (0..dirs.len())
                .map(|d| dirs.log_weights[d] + orient_phi[d * na + a])
                .collect();
            log_sum_exp(&terms)
        })
        .collect();
    [
        FactorState {
            indices: dirs.indices.clone(),
            log_phi: dir_phi,
        },
        FactorState {
            indices: inps.indices.clone(),
            log_phi: inp_phi,
        },
        FactorState {
            indices: samples.shifts.indices.clone(),
            log_phi: pll.shift_log_phi(),
        },
    ]
}

/// Result of one importance-sampled marginal evaluation.
#[derive(Clone, Debug)]
pub struct IsEstimate {
    pub log_marginal: f64,
    pub phi: [FactorState; 3],
    pub fraction_evaluated: f64,
    pub pose_logliks: PoseLogLik,
}

/// Importance-sampled estimate of the quadrature marginal for one image,
/// given its drawn samples. The slice set must hold every sampled
/// orientation.
pub fn is_marginal(
    obs: &ObservedImage,
    slices: &SliceSet,
    table: &ShiftTable,
    scheme: &QuadratureScheme,
    samples: &ImageSamples,
) -> IsEstimate {
    let pll = pose_logliks(obs, slices, table, samples.orientations(scheme), samples.shifts.clone());
    IsEstimate {
        log_marginal: pll.log_marginal(),
        phi: sampled_phi(&pll, samples),
        fraction_evaluated: samples.fraction_evaluated(scheme),
        pose_logliks: pll,
    }
}

/// Replaces the stored φ values and records the visit.
pub fn update_state(state: &ImportanceState, phi: [FactorState; 3], tau: u64) -> ImportanceState {
    ImportanceState {
        factors: phi,
        last_seen: Some(tau),
        generation: state.generation,
    }
}

/// Moves stored indices onto an upgraded scheme through the nearest-point
/// correspondence; entries landing on the same new point are combined.
pub fn migrate_state(state: &ImportanceState, map: &Correspondence, new_generation: u64) -> ImportanceState {
    let maps = [&map.directions, &map.inplanes, &map.shifts];
    let factors = std::array::from_fn(|f| {
        let old = &state.factors[f];
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for (&i, &lp) in old.indices.iter().zip(&old.log_phi) {
            let j = maps[f][i];
            let e = merged.entry(j).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, lp);
        }
        FactorState {
            indices: merged.keys().copied().collect(),
            log_phi: merged.values().copied().collect(),
        }
    });
    ImportanceState {
        factors,
        last_seen: state.last_seen,
        generation: new_generation,
    }
}

/// Kernel-smoothed direction distribution of a visited image at unit
/// temperature with the minimum uniform floor; uniform if never seen.
pub fn direction_distribution(state: &ImportanceState, kernel: &FactorKernel) -> Vec<f64> {
    let f = state.factor(Factor::Direction);
    if state.last_seen.is_none() || f.is_empty() {
        return uniform(kernel.len());
    }
    // a large visit index selects T = 1.25 and α = 0.05
    build_importance(f, kernel, Some(u64::MAX / 2), None, 1.0, None)
        .map(|d| d.q)
        .unwrap_or_else(|_| uniform(kernel.len()))
}
