//! Poses and their rotation matrices.
//!
//! A pose's rotation maps image-frame coordinates into the molecule frame.
//! Its third column is the beam direction expressed in the molecule frame,
//! so a central section for pose `R` samples the volume spectrum at
//! `R · (fx, fy, 0)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Rotation = Matrix3<f64>;

/// Orientation and translation of one particle, stored factored as
/// (direction on S², in-plane angle, shift in Å).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub direction: Vector3<f64>,
    pub inplane_angle: f64,
    pub shift: [f64; 2],
}

impl Pose {
    pub fn new(direction: Vector3<f64>, inplane_angle: f64, shift: [f64; 2]) -> Result<Self> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::NonUnitDirection(norm));
        }
        Ok(Self {
            direction,
            inplane_angle: inplane_angle.rem_euclid(std::f64::consts::TAU),
            shift,
        })
    }
}

fn rot_z(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Fixed rotation taking `+z` onto `d` (`Rz(φ)·Ry(θ)` in spherical angles).
pub fn direction_frame(d: &Vector3<f64>) -> Rotation {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let rxy = d.x.hypot(d.y);
    let phi = if rxy < 1e-15 { 0.0 } else { d.y.atan2(d.x) };
    rot_z(phi) * rot_y(theta)
}

/// Rotation for a (direction, in-plane angle) pair: `frame(d) · Rz(ψ)`.
pub fn orientation_matrix(d: &Vector3<f64>, inplane_angle: f64) -> Rotation {
    direction_frame(d) * rot_z(inplane_angle)
}

pub fn pose_to_rotation(p: &Pose) -> Result<Rotation> {
    let norm = p.direction.norm();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(orientation_matrix(&p.direction, p.inplane_angle))
}

/// Inverse of [`pose_to_rotation`]; the shift is carried through unchanged.
pub fn rotation_to_pose(r: &Rotation, shift: [f64; 2]) -> Pose {
    let d = r.column(2).into_owned().normalize();
    let rz = direction_frame(&d).transpose() * r;
    let angle = rz[(1, 0)].atan2(rz[(0, 0)]).rem_euclid(std::f64::consts::TAU);
    Pose {
        direction: d,
        inplane_angle: angle,
        shift,
    }
}
