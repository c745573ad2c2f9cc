//! Contrast transfer function of the microscope.
//!
//! `CTF(f) = -sqrt(1 - w²)·sin γ(f) - w·cos γ(f)` with
//! `γ(f) = π λ Δz f² - (π/2) Cs λ³ f⁴`, optionally damped by
//! `exp(-B f² / 4)`. `λ` is the relativistic electron wavelength.

use crate::error::{Error, Result};

/// Optics of one micrograph. Astigmatism is not modelled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtfParams {
    /// Defocus in Å (underfocus positive).
    pub defocus: f64,
    /// Spherical aberration in mm.
    pub spherical_aberration: f64,
    /// Accelerating voltage in kV.
    pub voltage: f64,
    /// Amplitude contrast fraction in `[0, 1]`.
    pub amplitude_contrast: f64,
    /// Envelope B-factor in Å²; zero disables the envelope.
    pub envelope_b_factor: f64,
    /// When set the CTF is identically one (test and simulation hook).
    pub identity: bool,
}

impl CtfParams {
    pub fn new(
        defocus: f64,
        spherical_aberration: f64,
        voltage: f64,
        amplitude_contrast: f64,
        envelope_b_factor: f64,
    ) -> Result<Self> {
        let p = Self {
            defocus,
            spherical_aberration,
            voltage,
            amplitude_contrast,
            envelope_b_factor,
            identity: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            defocus: 1.0,
            spherical_aberration: 0.0,
            voltage: 300.0,
            amplitude_contrast: 1.0,
            envelope_b_factor: 0.0,
            identity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!("CTF {what} out of range: {v}")))
        };
        if !(self.defocus.is_finite() && self.defocus > 0.0) {
            return bad("defocus", self.defocus);
        }
        if !(self.voltage.is_finite() && self.voltage > 0.0) {
            return bad("voltage", self.voltage);
        }
        if !(0.0..=1.0).contains(&self.amplitude_contrast) {
            return bad("amplitude contrast", self.amplitude_contrast);
        }
        if !(self.envelope_b_factor.is_finite() && self.envelope_b_factor >= 0.0) {
            return bad("B-factor", self.envelope_b_factor);
        }
        if !self.spherical_aberration.is_finite() {
            return bad("spherical aberration", self.spherical_aberration);
        }
        Ok(())
    }

    /// Relativistic electron wavelength in Å.
    pub fn wavelength(&self) -> f64 {
        electron_wavelength(self.voltage)
    }

    /// Phase aberration `γ(f)` for a frequency magnitude in cycles/Å.
    pub fn gamma(&self, f: f64) -> f64 {
        let lambda = self.wavelength();
        let cs = self.spherical_aberration * 1e7;
        let f2 = f * f;
        std::f64::consts::PI * lambda * self.defocus * f2
            - 0.5 * std::f64::consts::PI * cs * lambda.powi(3) * f2 * f2
    }
}

/// Relativistic electron wavelength in Å for an accelerating voltage in kV.
pub fn electron_wavelength(kv: f64) -> f64 {
    let v = kv * 1e3;
    12.264_259_7 / (v * (1.0 + 0.978_466e-6 * v)).sqrt()
}

/// CTF value at frequency magnitude `f` (cycles/Å).
pub fn ctf_eval(theta: &CtfParams, f: f64) -> f64 {
    if theta.identity {
        return 1.0;
    }
    let w = theta.amplitude_contrast;
    let g = theta.gamma(f);
    let mut v = -(1.0 - w * w).sqrt() * g.sin() - w * g.cos();
    if theta.envelope_b_factor > 0.0 {
        v *= (-theta.envelope_b_factor * f * f / 4.0).exp();
    }
    v
}
