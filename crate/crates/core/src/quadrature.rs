//! Weighted point sets over view directions, in-plane angles and shifts.
//!
//! Resolution follows the band limit: adjacent orientations are at most
//! `1 / (ρ · N · voxel_size)` radians apart, so rotating the outermost kept
//! frequency moves it by no more than one lattice cell.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{orientation_matrix, Rotation};

/// Angular spacing (radians) for band limit `rho` on an `n`-voxel grid.
pub fn angular_spacing(rho: f64, n: usize, voxel_size: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    Ok(1.0 / (rho * n as f64 * voxel_size))
}

fn check_nyquist(rho: f64, voxel_size: f64) -> Result<()> {
    let nyquist = 0.5 / voxel_size;
    if rho > nyquist * (1.0 + 1e-12) {
        return Err(Error::AboveNyquist { rho, nyquist });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    pub angular_spacing: f64,
}

impl DirectionSet {
    /// Spherical Fibonacci lattice with `count` points and equal weights.
    pub fn fibonacci(count: usize, angular_spacing: f64) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let m = count as f64;
        let points = (0..count)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / m;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        Self {
            points,
            weights: vec![1.0 / m; count],
            angular_spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the point closest in angle to `d`.
    pub fn nearest(&self, d: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let dot = p.dot(d);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InplaneSet {
    pub angles: Vec<f64>,
    pub weights: Vec<f64>,
}

impl InplaneSet {
    pub fn uniform(count: usize) -> Self {
        let angles = (0..count).map(|i| TAU * i as f64 / count as f64).collect();
        Self {
            angles,
            weights: vec![1.0 / count as f64; count],
        }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.angles.len() as f64
    }

    pub fn nearest(&self, angle: f64) -> usize {
        let m = self.angles.len();
        ((angle.rem_euclid(TAU) / self.spacing()).round() as usize) % m
    }
}

/// Square lattice of shifts centered at the origin. Weights are uniform and
/// `prior_values` hold the Gaussian shift density normalized over the lattice,
/// so that `Σ w·p = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSet {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub prior_values: Vec<f64>,
    pub spacing: f64,
    pub sigma: f64,
}

impl ShiftSet {
    pub fn single() -> Self {
        Self {
            points: vec![[0.0, 0.0]],
            weights: vec![1.0],
            prior_values: vec![1.0],
            spacing: 0.0,
            sigma: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, t: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

pub fn build_directions(rho: f64, n: usize, voxel_size: f64) -> Result<DirectionSet> {
    let spacing = angular_spacing(rho, n, voxel_size)?;
    let count = ((4.0 * PI / (spacing * spacing)).ceil() as usize).max(6);
    Ok(DirectionSet::fibonacci(count, spacing))
}

pub fn build_inplane(rho: f64, n: usize, voxel_size: f64) -> Result<InplaneSet> {
    let spacing = angular_spacing(rho, n, voxel_size)?;
    let count = ((TAU / spacing).ceil() as usize).max(1);
    Ok(InplaneSet::uniform(count))
}

/// Shift lattice with spacing `1/(2ρ)` covering `[-extent, extent]²`.
pub fn build_shifts(sigma_t: f64, extent: f64, rho: f64, n: usize, voxel_size: f64) -> Result<ShiftSet> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let half_box = n as f64 * voxel_size / 2.0;
    if extent > half_box {
        return Err(Error::InvalidArgument(format!(
            "shift extent {extent} Å exceeds half the box ({half_box} Å)"
        )));
    }
    if sigma_t <= 0.0 || extent <= 0.0 {
        return Ok(ShiftSet::single());
    }
    let spacing = 0.5 / rho;
    let k = (extent / spacing + 1e-9).floor() as i64;
    let mut points = Vec::new();
    for b in -k..=k {
        for a in -k..=k {
            points.push([a as f64 * spacing, b as f64 * spacing]);
        }
    }
    let m = points.len() as f64;
    let g: Vec<f64> = points
        .iter()
        .map(|p| (-(p[0] * p[0] + p[1] * p[1]) / (2.0 * sigma_t * sigma_t)).exp())
        .collect();
    let z: f64 = g.iter().sum();
    Ok(ShiftSet {
        prior_values: g.iter().map(|v| m * v / z).collect(),
        weights: vec![1.0 / m; points.len()],
        points,
        spacing,
        sigma: sigma_t,
    })
}

/// Shift prior and lattice configuration carried between resolutions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftPrior {
    pub sigma: f64,
    pub extent: f64,
}

impl ShiftPrior {
    /// Extent defaults to three standard deviations.
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            extent: 3.0 * sigma,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadratureScheme {
    pub directions: DirectionSet,
    pub inplanes: InplaneSet,
    pub shifts: ShiftSet,
    pub rho: f64,
    pub n: usize,
    pub voxel_size: f64,
    pub shift_prior: ShiftPrior,
    pub generation: u64,
    rotations: Vec<Rotation>,
}

impl QuadratureScheme {
    pub fn new(rho: f64, n: usize, voxel_size: f64, shift_prior: ShiftPrior) -> Result<Self> {
        check_nyquist(rho, voxel_size)?;
        let directions = build_directions(rho, n, voxel_size)?;
        let inplanes = build_inplane(rho, n, voxel_size)?;
        let shifts = build_shifts(shift_prior.sigma, shift_prior.extent, rho, n, voxel_size)?;
        Ok(Self::from_parts(directions, inplanes, shifts, rho, n, voxel_size, shift_prior, 0))
    }

    /// Assembles a scheme from explicit sets (useful for tiny test schemes).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        directions: DirectionSet,
        inplanes: InplaneSet,
        shifts: ShiftSet,
        rho: f64,
        n: usize,
        voxel_size: f64,
        shift_prior: ShiftPrior,
        generation: u64,
    ) -> Self {
        let mut rotations = Vec::with_capacity(directions.len() * inplanes.len());
        for d in &directions.points {
            for &a in &inplanes.angles {
                rotations.push(orientation_matrix(d, a));
            }
        }
        Self {
            directions,
            inplanes,
            shifts,
            rho,
            n,
            voxel_size,
            shift_prior,
            generation,
            rotations,
        }
    }

    /// `M_R = |directions| · |inplanes|`.
    pub fn orientation_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn shift_count(&self) -> usize {
        self.shifts.len()
    }

    /// Orientation `j` is direction `j / |inplanes|` combined with in-plane
    /// angle `j % |inplanes|`.
    pub fn rotation(&self, j: usize) -> &Rotation {
        &self.rotations[j]
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn split_orientation(&self, j: usize) -> (usize, usize) {
        (j / self.inplanes.len(), j % self.inplanes.len())
    }

    pub fn orientation_index(&self, dir: usize, inplane: usize) -> usize {
        dir * self.inplanes.len() + inplane
    }

    pub fn orientation_weight(&self, j: usize) -> f64 {
        let (d, a) = self.split_orientation(j);
        self.directions.weights[d] * self.inplanes.weights[a]
    }
}

/// Nearest-neighbour map from the points of an old scheme to a new one.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub directions: Vec<usize>,
    pub inplanes: Vec<usize>,
    pub shifts: Vec<usize>,
}

impl Correspondence {
    pub fn identity(scheme: &QuadratureScheme) -> Self {
        Self {
            directions: (0..scheme.directions.len()).collect(),
            inplanes: (0..scheme.inplanes.len()).collect(),
            shifts: (0..scheme.shifts.len()).collect(),
        }
    }
}

/// Builds the scheme for a higher band limit together with the old-to-new
/// nearest-point correspondence.
pub fn upgrade_scheme(old: &QuadratureScheme, new_rho: f64) -> Result<(QuadratureScheme, Correspondence)> {
    check_nyquist(new_rho, old.voxel_size)?;
    if new_rho < old.rho {
        return Err(Error::InvalidArgument(format!(
            "band limit may only grow ({} -> {new_rho})",
            old.rho
        )));
    }
    if new_rho == old.rho {
        return Ok((old.clone(), Correspondence::identity(old)));
    }
    let mut new = QuadratureScheme::new(new_rho, old.n, old.voxel_size, old.shift_prior)?;
    new.generation = old.generation + 1;
    let map = Correspondence {
        directions: old.directions.points.iter().map(|d| new.directions.nearest(d)).collect(),
        inplanes: old.inplanes.angles.iter().map(|&a| new.inplanes.nearest(a)).collect(),
        shifts: old.shifts.points.iter().map(|&t| new.shifts.nearest(t)).collect(),
    };
    Ok((new, map))
}
