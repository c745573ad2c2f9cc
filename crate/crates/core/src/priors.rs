//! Density priors as negative log-densities with gradients.
//!
//! The CAR prior penalizes each voxel's deviation from the mean of its 26
//! neighbours, with periodic wrap at the box edges.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::DensityVolume;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorSpec {
    Uniform,
    Exponential { lambda: f64 },
    Car { sigma: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Exponential { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(Error::InvalidArgument(format!("exponential prior needs lambda > 0, got {lambda}")))
            }
            PriorSpec::Car { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidArgument(format!("CAR prior needs sigma > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// Builds a spec from the CLI kind name and its parameters.
    pub fn from_parts(kind: &str, lambda: f64, sigma_car: f64) -> Result<Self> {
        let spec = match kind {
            "uniform" => PriorSpec::Uniform,
            "exp" | "exponential" => PriorSpec::Exponential { lambda },
            "car" => PriorSpec::Car { sigma: sigma_car },
            other => return Err(Error::InvalidArgument(format!("unknown prior '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PriorSpec::Uniform => "uniform",
            PriorSpec::Exponential { .. } => "exp",
            PriorSpec::Car { .. } => "car",
        }
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::Uniform => write!(f, "uniform"),
            PriorSpec::Exponential { lambda } => write!(f, "exp(lambda={lambda})"),
            PriorSpec::Car { sigma } => write!(f, "car(sigma={sigma})"),
        }
    }
}

impl FromStr for PriorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_parts(s, 1.0, 1.0)
    }
}

/// Exponential rate whose mean density is `fraction · scale`.
pub fn default_lambda(signal_scale: f64, fraction: f64) -> f64 {
    1.0 / (fraction * signal_scale)
}

fn grid_side(len: usize) -> Result<usize> {
    let n = (len as f64).cbrt().round() as usize;
    if n * n * n != len || n < 3 {
        return Err(Error::InvalidArgument(format!("{len} values do not form a cube of side >= 3")));
    }
    Ok(n)
}

/// `v_i − mean of the 26 neighbours of i` with periodic wrap.
pub fn car_residual(data: &[f64], n: usize) -> Vec<f64> {
    let idx = |x: usize, y: usize, z: usize| (z * n + y) * n + x;
    let mut out = vec![0.0; data.len()];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                for dz in [n - 1, 0, 1] {
                    for dy in [n - 1, 0, 1] {
                        for dx in [n - 1, 0, 1] {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            s += data[idx((x + dx) % n, (y + dy) % n, (z + dz) % n)];
                        }
                    }
                }
                out[idx(x, y, z)] = data[idx(x, y, z)] - s / 26.0;
            }
        }
    }
    out
}

/// Negative log prior on a raw cubic grid (x fastest).
pub fn neg_log_prior_raw(data: &[f64], spec: &PriorSpec) -> Result<f64> {
    spec.validate()?;
    match *spec {
        PriorSpec::Uniform => Ok(0.0),
        PriorSpec::Exponential { lambda } => {
            if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v < 0.0) {
                return Err(Error::NegativeVoxel { index: i, value: v });
            }
            Ok(lambda * data.iter().sum::<f64>() - data.len() as f64 * lambda.ln())
        }
        PriorSpec::Car { sigma } => {
            let n = grid_side(data.len())?;
            let r = car_residual(data, n);
            Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma))
        }
    }
}

/// [`neg_log_prior_raw`] with the exponential term continued linearly to
/// negative voxels, for evaluating trial points off the feasible set.
pub fn neg_log_prior_extended(data: &[f64], spec: &PriorSpec) -> Result<f64> {
    match *spec {
        PriorSpec::Exponential { lambda } => {
            spec.validate()?;
            Ok(lambda * data.iter().sum::<f64>() - data.len() as f64 * lambda.ln())
        }
        _ => neg_log_prior_raw(data, spec),
    }
}

/// Gradient of [`neg_log_prior_raw`].
pub fn neg_log_prior_grad_raw(data: &[f64], spec: &PriorSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    match *spec {
        PriorSpec::Uniform => Ok(vec![0.0; data.len()]),
        PriorSpec::Exponential { lambda } => {
            if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v < 0.0) {
                return Err(Error::NegativeVoxel { index: i, value: v });
            }
            Ok(vec![lambda; data.len()])
        }
        PriorSpec::Car { sigma } => {
            // the stencil is symmetric, so the operator is its own adjoint
            let n = grid_side(data.len())?;
            let r = car_residual(data, n);
            let s2 = sigma * sigma;
            Ok(car_residual(&r, n).into_iter().map(|v| v / s2).collect())
        }
    }
}

pub fn neg_log_prior(v: &DensityVolume, spec: &PriorSpec) -> Result<f64> {
    neg_log_prior_raw(v.data(), spec)
}

pub fn neg_log_prior_grad(v: &DensityVolume, spec: &PriorSpec) -> Result<Vec<f64>> {
    neg_log_prior_grad_raw(v.data(), spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * n * n).map(|_| rng.random_range(0.0..2.0)).collect()
    }

    #[test]
    fn closed_forms() {
        let zero = vec![0.0; 216];
        assert_eq!(neg_log_prior_raw(&random_grid(6, 1), &PriorSpec::Uniform).unwrap(), 0.0);
        let lam = 2.5;
        let e = neg_log_prior_raw(&zero, &PriorSpec::Exponential { lambda: lam }).unwrap();
        assert!((e + 216.0 * lam.ln()).abs() < 1e-12);
        let flat = vec![1.7; 216];
        assert!(neg_log_prior_raw(&flat, &PriorSpec::Car { sigma: 0.3 }).unwrap().abs() < 1e-20);
        let g = neg_log_prior_grad_raw(&flat, &PriorSpec::Car { sigma: 0.3 }).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let ge = neg_log_prior_grad_raw(&random_grid(6, 2), &PriorSpec::Exponential { lambda: lam }).unwrap();
        assert!(ge.iter().all(|&v| v == lam));
    }

    #[test]
    fn negative_voxel_rejected_under_exponential() {
        let mut v = random_grid(6, 3);
        v[17] = -0.1;
        assert!(matches!(
            neg_log_prior_raw(&v, &PriorSpec::Exponential { lambda: 1.0 }),
            Err(Error::NegativeVoxel { index: 17, .. })
        ));
        assert!(neg_log_prior_raw(&v, &PriorSpec::Car { sigma: 1.0 }).is_ok());
        let e = neg_log_prior_extended(&v, &PriorSpec::Exponential { lambda: 1.0 }).unwrap();
        assert!((e - v.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn car_gradient_matches_finite_differences() {
        let v = random_grid(6, 4);
        let spec = PriorSpec::Car { sigma: 0.7 };
        let g = neg_log_prior_grad_raw(&v, &spec).unwrap();
        let h = 1e-3;
        for i in 0..v.len() {
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            let fd = (neg_log_prior_raw(&p, &spec).unwrap() - neg_log_prior_raw(&m, &spec).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn exponential_gradient_matches_finite_differences() {
        let v = random_grid(6, 5);
        let spec = PriorSpec::Exponential { lambda: 0.8 };
        let g = neg_log_prior_grad_raw(&v, &spec).unwrap();
        let h = 1e-4;
        for i in (0..v.len()).step_by(7) {
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            let fd = (neg_log_prior_raw(&p, &spec).unwrap() - neg_log_prior_raw(&m, &spec).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs());
        }
    }

    #[test]
    fn parsing() {
        assert_eq!(PriorSpec::from_parts("exp", 2.0, 1.0).unwrap(), PriorSpec::Exponential { lambda: 2.0 });
        assert_eq!(PriorSpec::from_parts("car", 2.0, 0.5).unwrap(), PriorSpec::Car { sigma: 0.5 });
        assert!(PriorSpec::from_parts("gauss", 1.0, 1.0).is_err());
        assert!(PriorSpec::from_parts("exp", -1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn car_is_invariant_to_circular_shifts(seed in 0u64..1000, sx in 0usize..6, sy in 0usize..6, sz in 0usize..6) {
            let n = 6;
            let v = random_grid(n, seed);
            let mut w = vec![0.0; v.len()];
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        w[(((z + sz) % n) * n + (y + sy) % n) * n + (x + sx) % n] = v[(z * n + y) * n + x];
                    }
                }
            }
            let spec = PriorSpec::Car { sigma: 1.3 };
            let a = neg_log_prior_raw(&v, &spec).unwrap();
            let b = neg_log_prior_raw(&w, &spec).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }
}
