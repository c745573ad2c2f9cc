//! Unitary, origin-centered DFTs.
//!
//! With the spatial origin at index `N/2`, the forward transform is
//! `F(k) = N^{-d/2} Σ_x f(x) exp(-2πi k·(x - N/2)/N)`, stored centered. The
//! inverse is the exact adjoint, so Parseval holds with unit constant.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::volume::{DensityVolume, DiskLattice, FourierImage, FourierVolume, ParticleImage};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(n, direction))
}

/// In-place DFT along every axis of a `dims`-dimensional cube of side `n`,
/// followed by unitary scaling. Input and output use the uncentered layout.
fn transform_cube(data: &mut [Complex64], n: usize, dims: usize, direction: FftDirection) {
    let fft = plan(n, direction);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    // fastest axis: contiguous lines
    fft.process_with_scratch(data, &mut scratch);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let total = data.len();
    let mut stride = n;
    for _ in 1..dims {
        let block = stride * n;
        for base in (0..total).step_by(block) {
            for offset in 0..stride {
                let start = base + offset;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[start + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[start + i * stride] = *v;
                }
            }
        }
        stride = block;
    }
    let scale = (n as f64).powf(-(dims as f64) / 2.0);
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Rolls every axis by `n/2` (fftshift and ifftshift coincide for even `n`).
fn roll_half<T: Copy>(src: &[T], n: usize, dims: usize) -> Vec<T> {
    let h = n / 2;
    let mut out = src.to_vec();
    match dims {
        2 => {
            for y in 0..n {
                for x in 0..n {
                    out[((y + h) % n) * n + (x + h) % n] = src[y * n + x];
                }
            }
        }
        3 => {
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        out[(((z + h) % n) * n + (y + h) % n) * n + (x + h) % n] =
                            src[(z * n + y) * n + x];
                    }
                }
            }
        }
        _ => unreachable!("only 2D and 3D grids are used"),
    }
    out
}

/// Centered unitary transform of a real or complex cube.
pub fn fft_centered(data: &[Complex64], n: usize, dims: usize) -> Vec<Complex64> {
    let mut work = roll_half(data, n, dims);
    transform_cube(&mut work, n, dims, FftDirection::Forward);
    roll_half(&work, n, dims)
}

/// Inverse of [`fft_centered`].
pub fn ifft_centered(data: &[Complex64], n: usize, dims: usize) -> Vec<Complex64> {
    let mut work = roll_half(data, n, dims);
    transform_cube(&mut work, n, dims, FftDirection::Inverse);
    roll_half(&work, n, dims)
}

/// 3D transform of a density volume.
pub fn fft3(v: &DensityVolume) -> FourierVolume {
    let n = v.n();
    let input: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let out = fft_centered(&input, n, 3);
    FourierVolume::from_vec(n, v.voxel_size(), out).expect("shape preserved")
}

/// Inverse 3D transform; the imaginary part (zero for Hermitian input) is
/// discarded.
pub fn ifft3(f: &FourierVolume) -> DensityVolume {
    let n = f.n();
    let out = ifft_centered(f.data(), n, 3);
    DensityVolume::from_vec(n, f.voxel_size(), out.iter().map(|c| c.re).collect())
        .expect("shape preserved")
}

/// Full centered 2D transform of a real `n × n` grid.
pub fn fft2_grid(data: &[f64], n: usize) -> Vec<Complex64> {
    let input: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_centered(&input, n, 2)
}

/// 2D transform of a particle image truncated to the disk of radius `rho`.
pub fn fft2(img: &ParticleImage, rho: f64) -> Result<FourierImage> {
    let nyquist = img.nyquist();
    if rho > nyquist * (1.0 + 1e-12) {
        return Err(Error::AboveNyquist { rho, nyquist });
    }
    let lattice = DiskLattice::new(img.n(), img.pixel_size(), rho)?;
    Ok(fft2_on(img.data(), &lattice))
}

/// 2D transform of a real grid gathered onto an existing lattice.
pub fn fft2_on(data: &[f64], lattice: &Arc<DiskLattice>) -> FourierImage {
    let full = fft2_grid(data, lattice.n());
    let coeffs = lattice.grid_index().iter().map(|&g| full[g]).collect();
    FourierImage::from_vec(lattice.clone(), coeffs).expect("lattice sized")
}

/// Inverse 2D transform of a band-limited image (absent coefficients are
/// zero). Returns the real part on an `n × n` grid.
pub fn ifft2(img: &FourierImage) -> Vec<f64> {
    let lat = img.lattice();
    let n = lat.n();
    let mut full = vec![Complex64::new(0.0, 0.0); n * n];
    for (&g, &c) in lat.grid_index().iter().zip(img.data()) {
        full[g] = c;
    }
    ifft_centered(&full, n, 2).iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctf::CtfParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn direct_dft3(v: &DensityVolume) -> Vec<Complex64> {
        let n = v.n();
        let h = (n / 2) as i64;
        let norm = (n as f64).powf(-1.5);
        let mut out = vec![Complex64::new(0.0, 0.0); n * n * n];
        for kz in -h..h {
            for ky in -h..h {
                for kx in -h..h {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for z in 0..n {
                        for y in 0..n {
                            for x in 0..n {
                                let phase = -2.0 * PI
                                    * ((kx * (x as i64 - h) + ky * (y as i64 - h) + kz * (z as i64 - h))
                                        as f64)
                                    / n as f64;
                                acc += Complex64::from_polar(v.get(x, y, z), phase);
                            }
                        }
                    }
                    let p = (((kz + h) as usize * n) + (ky + h) as usize) * n + (kx + h) as usize;
                    out[p] = acc * norm;
                }
            }
        }
        out
    }

    fn random_volume(n: usize, seed: u64) -> DensityVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        DensityVolume::from_vec(n, 1.3, data).unwrap()
    }

    #[test]
    fn fft3_matches_direct_dft() {
        let v = random_volume(8, 1);
        let f = fft3(&v);
        let d = direct_dft3(&v);
        let err = f
            .data()
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max abs error {err}");
    }

    #[test]
    fn fft3_round_trip_16() {
        let v = random_volume(16, 2);
        let back = ifft3(&fft3(&v));
        let num: f64 = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = v.data().iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn constant_volume_is_dc_only() {
        let v = DensityVolume::from_fn(8, 1.0, |_, _, _| 2.5).unwrap();
        let f = fft3(&v);
        for kz in -4..4 {
            for ky in -4..4 {
                for kx in -4..4 {
                    let c = f.at(kx, ky, kz);
                    if (kx, ky, kz) == (0, 0, 0) {
                        assert!((c.re - 2.5 * (512f64).sqrt()).abs() < 1e-10);
                    } else {
                        assert!(c.norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn centered_delta_has_flat_spectrum() {
        let v = DensityVolume::from_fn(8, 1.0, |x, y, z| {
            if x == 0.0 && y == 0.0 && z == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let f = fft3(&v);
        let expected = (512f64).powf(-0.5);
        for c in f.data() {
            assert!((c.re - expected).abs() < 1e-14 && c.im.abs() < 1e-14);
        }
    }

    #[test]
    fn fft3_parseval_and_hermitian() {
        let v = random_volume(16, 3);
        let f = fft3(&v);
        let e_real: f64 = v.data().iter().map(|a| a * a).sum();
        let e_four: f64 = f.data().iter().map(|c| c.norm_sqr()).sum();
        assert!((e_real - e_four).abs() / e_real < 1e-9);
        assert!(f.hermitian_error() < 1e-10);
    }

    #[test]
    fn fft2_matches_direct_dft() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = fft2_grid(&data, n);
        let h = 4i64;
        for ky in -h..h {
            for kx in -h..h {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ph = -2.0 * PI * ((kx * (x as i64 - h) + ky * (y as i64 - h)) as f64) / n as f64;
                        acc += Complex64::from_polar(data[y * n + x], ph);
                    }
                }
                acc /= n as f64;
                let got = full[((ky + h) as usize) * n + (kx + h) as usize];
                assert!((got - acc).norm() < 1e-9);
            }
        }
        let e_real: f64 = data.iter().map(|a| a * a).sum();
        let e_four: f64 = full.iter().map(|c| c.norm_sqr()).sum();
        assert!((e_real - e_four).abs() / e_real < 1e-9);
    }

    #[test]
    fn fft2_constant_image_is_dc_only() {
        let n = 16;
        let img = ParticleImage::new(n, 2.0, vec![1.0; n * n], CtfParams::identity(), 1.0).unwrap();
        let f = fft2(&img, img.nyquist()).unwrap();
        for (p, c) in f.lattice().points().iter().zip(f.data()) {
            if *p == [0, 0] {
                assert!((c.re - 16.0).abs() < 1e-10);
            } else {
                assert!(c.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fft2_impulse_is_flat_after_truncation() {
        let n = 16;
        let mut data = vec![0.0; n * n];
        data[8 * n + 8] = 1.0;
        let img = ParticleImage::new(n, 1.0, data, CtfParams::identity(), 1.0).unwrap();
        let f = fft2(&img, 0.3).unwrap();
        for c in f.data() {
            assert!((c.re - 1.0 / 16.0).abs() < 1e-14 && c.im.abs() < 1e-14);
        }
    }

    #[test]
    fn fft2_rejects_above_nyquist() {
        let img = ParticleImage::new(8, 1.0, vec![0.0; 64], CtfParams::identity(), 1.0).unwrap();
        assert!(matches!(fft2(&img, 0.6), Err(Error::AboveNyquist { .. })));
    }

    #[test]
    fn band_limited_round_trip() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lat = DiskLattice::new(n, 1.0, 0.2).unwrap();
        let f = fft2_on(&data, &lat);
        let low = ifft2(&f);
        let again = fft2_on(&low, &lat);
        for (a, b) in f.data().iter().zip(again.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
