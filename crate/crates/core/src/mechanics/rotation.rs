//! ZYX (yaw-pitch-roll) Euler-angle chart.
//!
//! Angles are stored as `(roll, pitch, yaw)` so that, near the identity, the
//! vector coincides with the rotation vector. `R = Rz(yaw) · Ry(pitch) · Rx(roll)`
//! maps base-frame vectors to the world frame.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::MechanicsError;

/// Margin kept from the `±π/2` pitch singularity.
pub const CHART_MARGIN: f64 = 1e-3;

pub fn rotation_zyx(angles: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = angles.x.sin_cos();
    let (sp, cp) = angles.y.sin_cos();
    let (sy, cy) = angles.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// `T(θ)` with `θ̇ = T(θ) ω`, `ω` expressed in the base frame.
pub fn euler_rate_map(angles: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = angles.x.sin_cos();
    let (sp, cp) = angles.y.sin_cos();
    let tp = sp / cp;
    Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    )
}

pub fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

pub fn quaternion_from_euler(angles: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(angles.x, angles.y, angles.z)
}

pub fn check_pitch(angles: &Vector3<f64>) -> Result<(), MechanicsError> {
    if angles.y.abs() >= std::f64::consts::FRAC_PI_2 - CHART_MARGIN || !angles.y.is_finite() {
        Err(MechanicsError::ChartSingularity {
            pitch: angles.y,
            margin: CHART_MARGIN,
        })
    } else {
        Ok(())
    }
}

/// Rotation angle [rad] taking `desired` onto `actual`.
pub fn rotation_angle_between(actual: &UnitQuaternion<f64>, desired: &UnitQuaternion<f64>) -> f64 {
    let e: Quaternion<f64> = desired.quaternion() * actual.quaternion().conjugate();
    2.0 * e.imag().norm().atan2(e.w.abs())
}
