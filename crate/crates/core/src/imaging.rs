//! Linear forward operators: central-section extraction, Fourier phase
//! shift, CTF modulation, and their adjoints.
//!
//! Sections are interpolated with a Kaiser-Bessel windowed sinc of even
//! footprint `W`. The kernel vanishes at nonzero integers, so sections are
//! exact at lattice points; the volume is pre-divided in real space by the
//! kernel's continuous transform to flatten its passband roll-off.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::ctf::{ctf_eval, CtfParams};
use crate::error::{Error, Result};
use crate::fft;
use crate::geometry::Rotation;
use crate::math::bessel_i0;
use crate::volume::{wrap_index, DensityVolume, DiskLattice, FourierImage, FourierVolume};

pub const MAX_FOOTPRINT: usize = 16;
const TABLE_PER_UNIT: usize = 2048;

/// Kaiser-Bessel windowed sinc, tabulated for fast evaluation.
#[derive(Clone, Debug)]
pub struct WindowedSinc {
    width: usize,
    beta: f64,
    table: Vec<f64>,
}

impl WindowedSinc {
    pub fn new(width: usize, beta: f64) -> Result<Self> {
        if width < 2 || width % 2 != 0 || width > MAX_FOOTPRINT {
            return Err(Error::InvalidArgument(format!(
                "interpolation footprint must be even in [2, {MAX_FOOTPRINT}], got {width}"
            )));
        }
        let half = width / 2;
        let table = (0..=half * TABLE_PER_UNIT)
            .map(|i| Self::exact(i as f64 / TABLE_PER_UNIT as f64, width, beta))
            .collect();
        Ok(Self { width, beta, table })
    }

    /// Default shape parameter for a footprint.
    pub fn default_beta(width: usize) -> f64 {
        PI * (0.25 * (width * width) as f64 - 0.8).max(0.5).sqrt()
    }

    fn exact(x: f64, width: usize, beta: f64) -> f64 {
        let half = width as f64 / 2.0;
        let ax = x.abs();
        if ax >= half {
            return 0.0;
        }
        let sinc = if ax < 1e-12 { 1.0 } else { (PI * ax).sin() / (PI * ax) };
        let t = ax / half;
        let window = bessel_i0(beta * (1.0 - t * t).sqrt()) / bessel_i0(beta);
        sinc * window
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let pos = x.abs() * TABLE_PER_UNIT as f64;
        let i = pos as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let frac = pos - i as f64;
        self.table[i] + frac * (self.table[i + 1] - self.table[i])
    }

    /// Continuous transform `∫ h(s) cos(2π s u) ds` (Simpson's rule).
    pub fn transform(&self, u: f64) -> f64 {
        let half = self.width as f64 / 2.0;
        let steps = 4000;
        let dx = 2.0 * half / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let s = -half + i as f64 * dx;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * Self::exact(s, self.width, self.beta) * (2.0 * PI * s * u).cos();
        }
        acc * dx / 3.0
    }
}

/// Interpolation footprint along one axis: first lattice index and weights.
#[derive(Clone, Copy, Debug)]
struct Axis {
    pos: [usize; MAX_FOOTPRINT],
    w: [f64; MAX_FOOTPRINT],
}

/// Rotated 3D coordinates of every point of a disk lattice, in units of the
/// (possibly oversampled) Fourier grid. All lie on the plane through the
/// origin orthogonal to the beam direction.
#[derive(Clone, Debug)]
pub struct SliceCoords {
    coords: Vec<[f64; 3]>,
}

impl SliceCoords {
    pub fn new(rot: &Rotation, lattice: &DiskLattice, scale: f64) -> Self {
        let coords = lattice
            .points()
            .iter()
            .map(|&[kx, ky]| {
                let (x, y) = (kx as f64 * scale, ky as f64 * scale);
                [
                    rot[(0, 0)] * x + rot[(0, 1)] * y,
                    rot[(1, 0)] * x + rot[(1, 1)] * y,
                    rot[(2, 0)] * x + rot[(2, 1)] * y,
                ]
            })
            .collect();
        Self { coords }
    }

    /// 3D lattice coordinate of each sample.
    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }
}

/// Holds the interpolation kernel and the matching real-space correction
/// for one grid size; converts densities into sliceable Fourier volumes.
///
/// The volume is zero-padded by `oversampling` before the transform, so the
/// Fourier grid has side `N · oversampling` and original lattice frequency `k`
/// sits at padded index `oversampling · k`.
#[derive(Clone, Debug)]
pub struct Projector {
    n: usize,
    oversampling: usize,
    kernel: WindowedSinc,
    correction: Vec<f64>,
}

impl Projector {
    pub fn new(n: usize, footprint: usize) -> Result<Self> {
        Self::with_params(n, footprint, 2, WindowedSinc::default_beta(footprint))
    }

    pub fn with_params(n: usize, footprint: usize, oversampling: usize, beta: f64) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("grid side must be even and >= 8, got {n}")));
        }
        if oversampling == 0 {
            return Err(Error::InvalidArgument("oversampling must be >= 1".into()));
        }
        let kernel = WindowedSinc::new(footprint, beta)?;
        let nf = n * oversampling;
        // per-axis share of the gain that makes sections equal the 2D unitary
        // transform of the line-integral projection on the N-grid
        let axis_gain = ((nf as f64).powf(1.5) / n as f64).powf(-1.0 / 3.0);
        let h = (n / 2) as f64;
        let correction = (0..n)
            .map(|i| kernel.transform((i as f64 - h) / nf as f64) * axis_gain)
            .collect();
        Ok(Self {
            n,
            oversampling,
            kernel,
            correction,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Side of the Fourier grid.
    pub fn fourier_n(&self) -> usize {
        self.n * self.oversampling
    }

    pub fn oversampling(&self) -> usize {
        self.oversampling
    }

    pub fn footprint(&self) -> usize {
        self.kernel.width()
    }

    pub fn kernel(&self) -> &WindowedSinc {
        &self.kernel
    }

    fn check_real(&self, n: usize) -> Result<()> {
        if n != self.n {
            return Err(Error::InvalidArgument(format!(
                "projector built for N={}, got N={n}",
                self.n
            )));
        }
        Ok(())
    }

    fn check_fourier(&self, n: usize) -> Result<()> {
        if n != self.fourier_n() {
            return Err(Error::InvalidArgument(format!(
                "projector expects a Fourier grid of side {}, got {n}",
                self.fourier_n()
            )));
        }
        Ok(())
    }

    /// Pads, pre-divides by the kernel transform and takes the 3D DFT. The
    /// scaling makes the inverse 2D transform of a section approximate the
    /// real-space sum of voxels along the beam.
    pub fn prepare(&self, v: &DensityVolume) -> Result<FourierVolume> {
        self.check_real(v.n())?;
        let n = self.n;
        let nf = self.fourier_n();
        let off = (nf - n) / 2;
        let mut padded = vec![Complex64::new(0.0, 0.0); nf * nf * nf];
        let c = &self.correction;
        for z in 0..n {
            for y in 0..n {
                let czy = c[z] * c[y];
                for x in 0..n {
                    let val = v.data()[(z * n + y) * n + x] / (czy * c[x]);
                    padded[((z + off) * nf + y + off) * nf + x + off] = Complex64::new(val, 0.0);
                }
            }
        }
        let out = fft::fft_centered(&padded, nf, 3);
        FourierVolume::from_vec(nf, v.voxel_size(), out)
    }

    /// Adjoint of [`Projector::prepare`]: maps a gradient with respect to the
    /// Fourier coefficients (`∂/∂Re + i ∂/∂Im`) to the gradient with respect
    /// to the real density.
    pub fn prepare_adjoint(&self, g: &FourierVolume) -> Result<Vec<f64>> {
        self.check_fourier(g.n())?;
        let n = self.n;
        let nf = self.fourier_n();
        let off = (nf - n) / 2;
        let back = fft::ifft_centered(g.data(), nf, 3);
        let c = &self.correction;
        let mut out = vec![0.0; n * n * n];
        for z in 0..n {
            for y in 0..n {
                let czy = c[z] * c[y];
                for x in 0..n {
                    out[(z * n + y) * n + x] =
                        back[((z + off) * nf + y + off) * nf + x + off].re / (czy * c[x]);
                }
            }
        }
        Ok(out)
    }

    /// Empty accumulator matching this projector's Fourier grid.
    pub fn zero_fourier(&self, voxel_size: f64) -> FourierVolume {
        FourierVolume::zeros(self.fourier_n(), voxel_size).expect("valid grid")
    }

    #[inline]
    fn axis(&self, c: f64) -> Axis {
        let w = self.kernel.width();
        let nf = self.fourier_n();
        let base = c.floor() as i64 - (w as i64 / 2 - 1);
        let mut a = Axis {
            pos: [0; MAX_FOOTPRINT],
            w: [0.0; MAX_FOOTPRINT],
        };
        for i in 0..w {
            let m = base + i as i64;
            a.pos[i] = wrap_index(m, nf);
            a.w[i] = self.kernel.eval(c - m as f64);
        }
        a
    }

    /// Central section `P_R V` sampled on `lattice`.
    pub fn extract_slice(
        &self,
        vol: &FourierVolume,
        rot: &Rotation,
        lattice: &std::sync::Arc<DiskLattice>,
    ) -> Result<FourierImage> {
        self.check_fourier(vol.n())?;
        if lattice.n() != self.n {
            return Err(Error::InvalidArgument("lattice and volume sizes differ".into()));
        }
        let coords = self.slice_coords(rot, lattice);
        let mut out = FourierImage::zeros(lattice.clone());
        self.extract_into(vol, &coords, out.data_mut());
        Ok(out)
    }

    /// Section coordinates on this projector's Fourier grid.
    pub fn slice_coords(&self, rot: &Rotation, lattice: &DiskLattice) -> SliceCoords {
        SliceCoords::new(rot, lattice, self.oversampling as f64)
    }

    /// Interpolates `vol` at precomputed coordinates.
    pub fn extract_into(&self, vol: &FourierVolume, coords: &SliceCoords, out: &mut [Complex64]) {
        let n = self.fourier_n();
        let w = self.kernel.width();
        let data = vol.data();
        for (o, c) in out.iter_mut().zip(coords.coords()) {
            let ax = self.axis(c[0]);
            let ay = self.axis(c[1]);
            let az = self.axis(c[2]);
            let mut acc = Complex64::new(0.0, 0.0);
            for iz in 0..w {
                let wz = az.w[iz];
                if wz == 0.0 {
                    continue;
                }
                let zoff = az.pos[iz] * n;
                let mut accy = Complex64::new(0.0, 0.0);
                for iy in 0..w {
                    let wy = ay.w[iy];
                    if wy == 0.0 {
                        continue;
                    }
                    let row = (zoff + ay.pos[iy]) * n;
                    let mut accx = Complex64::new(0.0, 0.0);
                    for ix in 0..w {
                        accx += data[row + ax.pos[ix]] * ax.w[ix];
                    }
                    accy += accx * wy;
                }
                acc += accy * wz;
            }
            *o = acc;
        }
    }

    /// Accumulates `P_Rᵀ img` into `accum`.
    pub fn adjoint_slice(
        &self,
        img: &FourierImage,
        rot: &Rotation,
        accum: &mut FourierVolume,
    ) -> Result<()> {
        self.check_fourier(accum.n())?;
        if img.lattice().n() != self.n {
            return Err(Error::InvalidArgument("lattice and volume sizes differ".into()));
        }
        let coords = self.slice_coords(rot, img.lattice());
        self.adjoint_into(img.data(), &coords, accum);
        Ok(())
    }

    /// Scatters samples at precomputed coordinates into `accum`.
    pub fn adjoint_into(&self, values: &[Complex64], coords: &SliceCoords, accum: &mut FourierVolume) {
        let n = self.fourier_n();
        let w = self.kernel.width();
        let data = accum.data_mut();
        for (v, c) in values.iter().zip(coords.coords()) {
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            let ax = self.axis(c[0]);
            let ay = self.axis(c[1]);
            let az = self.axis(c[2]);
            for iz in 0..w {
                let wz = az.w[iz];
                if wz == 0.0 {
                    continue;
                }
                let zoff = az.pos[iz] * n;
                let vz = v * wz;
                for iy in 0..w {
                    let wy = ay.w[iy];
                    if wy == 0.0 {
                        continue;
                    }
                    let row = (zoff + ay.pos[iy]) * n;
                    let vy = vz * wy;
                    for ix in 0..w {
                        data[row + ax.pos[ix]] += vy * ax.w[ix];
                    }
                }
            }
        }
    }

    /// `C_θ S_t P_R V` on `lattice`.
    pub fn forward_model(
        &self,
        vol: &FourierVolume,
        rot: &Rotation,
        shift: [f64; 2],
        theta: &CtfParams,
        lattice: &std::sync::Arc<DiskLattice>,
    ) -> Result<FourierImage> {
        let slice = self.extract_slice(vol, rot, lattice)?;
        Ok(apply_ctf(&apply_shift(&slice, shift), theta))
    }
}

/// Phase factor `exp(-2πi f·t)` of a shift `t` (Å) at frequency `f` (1/Å).
#[inline]
pub fn shift_phase(f: &[f64; 2], t: [f64; 2]) -> Complex64 {
    let arg = -2.0 * PI * (f[0] * t[0] + f[1] * t[1]);
    Complex64::from_polar(1.0, arg)
}

/// Translates image content by `t` (Å) through a Fourier phase ramp.
pub fn apply_shift(img: &FourierImage, t: [f64; 2]) -> FourierImage {
    if t == [0.0, 0.0] {
        return img.clone();
    }
    let mut out = img.clone();
    let freqs = img.lattice().freqs();
    for (c, f) in out.data_mut().iter_mut().zip(freqs) {
        *c *= shift_phase(f, t);
    }
    out
}

/// CTF values at every point of a lattice.
pub fn ctf_values(theta: &CtfParams, lattice: &DiskLattice) -> Vec<f64> {
    lattice.radii().iter().map(|&f| ctf_eval(theta, f)).collect()
}

/// Pointwise CTF modulation.
pub fn apply_ctf(img: &FourierImage, theta: &CtfParams) -> FourierImage {
    if theta.identity {
        return img.clone();
    }
    let mut out = img.clone();
    let radii = img.lattice().radii();
    for (c, &f) in out.data_mut().iter_mut().zip(radii) {
        *c *= ctf_eval(theta, f);
    }
    out
}
