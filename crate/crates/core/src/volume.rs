//! Dense grids for densities and particle images, and their band-limited
//! Fourier counterparts.
//!
//! Real-space grids are stored row-major with `x` fastest (`[z][y][x]` for
//! volumes, `[y][x]` for images); the physical origin sits at index `N/2` on
//! every axis. Fourier grids are stored *centered*: frequency index
//! `k ∈ [-N/2, N/2)` lives at position `k + N/2`. Lattice index `k` corresponds
//! to `k / (N · voxel_size)` cycles/Å.

use std::sync::Arc;

use num_complex::Complex64;

use crate::ctf::CtfParams;
use crate::error::{Error, Result};

fn check_side(n: usize) -> Result<()> {
    if n < 8 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid side must be even and >= 8, got {n}"
        )));
    }
    Ok(())
}

fn check_spacing(s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "voxel/pixel size must be positive, got {s}"
        )));
    }
    Ok(())
}

/// Wraps a signed lattice index onto a centered storage position.
#[inline]
pub fn wrap_index(k: i64, n: usize) -> usize {
    (k + (n / 2) as i64).rem_euclid(n as i64) as usize
}

/// Real electron density on an `N × N × N` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityVolume {
    n: usize,
    voxel_size: f64,
    data: Vec<f64>,
}

impl DensityVolume {
    pub fn zeros(n: usize, voxel_size: f64) -> Result<Self> {
        check_side(n)?;
        check_spacing(voxel_size)?;
        Ok(Self {
            n,
            voxel_size,
            data: vec![0.0; n * n * n],
        })
    }

    pub fn from_vec(n: usize, voxel_size: f64, data: Vec<f64>) -> Result<Self> {
        check_side(n)?;
        check_spacing(voxel_size)?;
        if data.len() != n * n * n {
            return Err(Error::InvalidArgument(format!(
                "volume data has {} entries, expected {}",
                data.len(),
                n * n * n
            )));
        }
        Ok(Self { n, voxel_size, data })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at centered voxel
    /// coordinates measured in voxels.
    pub fn from_fn(n: usize, voxel_size: f64, f: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        let mut v = Self::zeros(n, voxel_size)?;
        let c = (n / 2) as f64;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    v.data[(z * n + y) * n + x] = f(x as f64 - c, y as f64 - c, z as f64 - c);
                }
            }
        }
        Ok(v)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.n + y) * self.n + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Sets every negative entry to zero.
    pub fn truncate_negative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn min_max_mean(&self) -> (f64, f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        (lo, hi, sum / self.data.len() as f64)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// The centered 3D DFT of a real `N³` volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVolume {
    n: usize,
    voxel_size: f64,
    data: Vec<Complex64>,
}

impl FourierVolume {
    pub fn zeros(n: usize, voxel_size: f64) -> Result<Self> {
        check_side(n)?;
        check_spacing(voxel_size)?;
        Ok(Self {
            n,
            voxel_size,
            data: vec![Complex64::new(0.0, 0.0); n * n * n],
        })
    }

    pub fn from_vec(n: usize, voxel_size: f64, data: Vec<Complex64>) -> Result<Self> {
        check_side(n)?;
        check_spacing(voxel_size)?;
        if data.len() != n * n * n {
            return Err(Error::InvalidArgument(format!(
                "Fourier volume has {} entries, expected {}",
                data.len(),
                n * n * n
            )));
        }
        Ok(Self { n, voxel_size, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.voxel_size
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Coefficient at signed lattice frequency `(kx, ky, kz)`, wrapping
    /// periodically.
    #[inline]
    pub fn at(&self, kx: i64, ky: i64, kz: i64) -> Complex64 {
        let n = self.n;
        self.data[(wrap_index(kz, n) * n + wrap_index(ky, n)) * n + wrap_index(kx, n)]
    }

    /// Largest relative deviation from Hermitian symmetry `F(-k) = conj F(k)`.
    pub fn hermitian_error(&self) -> f64 {
        let h = (self.n / 2) as i64;
        let scale = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
        let mut worst: f64 = 0.0;
        for kz in -h..h {
            for ky in -h..h {
                for kx in -h..h {
                    let d = self.at(kx, ky, kz) - self.at(-kx, -ky, -kz).conj();
                    worst = worst.max(d.norm());
                }
            }
        }
        worst / scale
    }

    pub fn add_assign(&mut self, other: &FourierVolume) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// `Re Σ conj(self) · other`.
    pub fn real_inner(&self, other: &FourierVolume) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}

/// One observed particle image with its optics and noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleImage {
    n: usize,
    pixel_size: f64,
    data: Vec<f64>,
    pub ctf: CtfParams,
    pub noise_sigma: f64,
}

impl ParticleImage {
    pub fn new(
        n: usize,
        pixel_size: f64,
        data: Vec<f64>,
        ctf: CtfParams,
        noise_sigma: f64,
    ) -> Result<Self> {
        check_side(n)?;
        check_spacing(pixel_size)?;
        if data.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "image data has {} pixels, expected {}",
                data.len(),
                n * n
            )));
        }
        if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be positive, got {noise_sigma}"
            )));
        }
        Ok(Self {
            n,
            pixel_size,
            data,
            ctf,
            noise_sigma,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// The set of 2D lattice frequencies kept for a band limit `rho`.
///
/// A point `(kx, ky)` is kept when `kx² + ky² ≤ (rho·N·pixel_size)²` and both
/// components lie strictly inside `(-N/2, N/2)`, so the set is closed under
/// negation.
#[derive(Debug, PartialEq)]
pub struct DiskLattice {
    n: usize,
    pixel_size: f64,
    rho: f64,
    points: Vec<[i32; 2]>,
    freqs: Vec<[f64; 2]>,
    radii: Vec<f64>,
    grid_index: Vec<usize>,
}

impl DiskLattice {
    pub fn new(n: usize, pixel_size: f64, rho: f64) -> Result<Arc<Self>> {
        check_side(n)?;
        check_spacing(pixel_size)?;
        let nyquist = 0.5 / pixel_size;
        if !(rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        if rho > nyquist * (1.0 + 1e-12) {
            return Err(Error::AboveNyquist { rho, nyquist });
        }
        let r = rho * n as f64 * pixel_size;
        let r2 = r * r * (1.0 + 1e-12);
        let h = (n / 2) as i32;
        let unit = 1.0 / (n as f64 * pixel_size);
        let mut points = Vec::new();
        let mut freqs = Vec::new();
        let mut radii = Vec::new();
        let mut grid_index = Vec::new();
        for ky in (-h + 1)..h {
            for kx in (-h + 1)..h {
                let d2 = (kx * kx + ky * ky) as f64;
                if d2 <= r2 {
                    points.push([kx, ky]);
                    let f = [kx as f64 * unit, ky as f64 * unit];
                    radii.push((f[0] * f[0] + f[1] * f[1]).sqrt());
                    freqs.push(f);
                    grid_index.push(wrap_index(ky as i64, n) * n + wrap_index(kx as i64, n));
                }
            }
        }
        Ok(Arc::new(Self {
            n,
            pixel_size,
            rho,
            points,
            freqs,
            radii,
            grid_index,
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Band-limit radius in lattice units.
    pub fn lattice_radius(&self) -> f64 {
        self.rho * self.n as f64 * self.pixel_size
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integer lattice coordinates `(kx, ky)`.
    pub fn points(&self) -> &[[i32; 2]] {
        &self.points
    }

    /// Physical frequencies in cycles/Å.
    pub fn freqs(&self) -> &[[f64; 2]] {
        &self.freqs
    }

    /// Frequency magnitudes in cycles/Å.
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Position of each point in a centered `N × N` grid.
    pub fn grid_index(&self) -> &[usize] {
        &self.grid_index
    }

    /// Index of the point `-k` for every point `k`.
    pub fn negation_map(&self) -> Vec<usize> {
        let mut lookup = vec![usize::MAX; self.n * self.n];
        for (i, &g) in self.grid_index.iter().enumerate() {
            lookup[g] = i;
        }
        self.points
            .iter()
            .map(|&[kx, ky]| {
                lookup[wrap_index(-ky as i64, self.n) * self.n + wrap_index(-kx as i64, self.n)]
            })
            .collect()
    }
}

/// Fourier coefficients of an image restricted to a disk lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierImage {
    lattice: Arc<DiskLattice>,
    data: Vec<Complex64>,
}

impl FourierImage {
    pub fn zeros(lattice: Arc<DiskLattice>) -> Self {
        let data = vec![Complex64::new(0.0, 0.0); lattice.len()];
        Self { lattice, data }
    }

    pub fn from_vec(lattice: Arc<DiskLattice>, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != lattice.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for a lattice of {}",
                data.len(),
                lattice.len()
            )));
        }
        Ok(Self { lattice, data })
    }

    pub fn lattice(&self) -> &Arc<DiskLattice> {
        &self.lattice
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `Re Σ conj(self) · other`.
    pub fn real_inner(&self, other: &FourierImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> FourierImage {
        FourierImage {
            lattice: self.lattice.clone(),
            data: self.data.iter().map(|c| c * s).collect(),
        }
    }

    pub fn sub(&self, other: &FourierImage) -> FourierImage {
        FourierImage {
            lattice: self.lattice.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &FourierImage) -> FourierImage {
        FourierImage {
            lattice: self.lattice.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }
}
