use nalgebra::{Matrix3, SVector, Vector3};

use super::MechanicsError;

/// Inertial parameters of a rigid body about its reference origin, in the
/// standard linear layout `[m, m·c_x, m·c_y, m·c_z, I_xx, I_xy, I_xz, I_yy, I_yz, I_zz]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InertialParameters {
    pub mass: f64,
    /// First mass moment `m·c` [kg·m].
    pub first_moment: Vector3<f64>,
    /// Rotational inertia about the reference origin, `(xx, xy, xz, yy, yz, zz)` [kg·m²].
    pub inertia: [f64; 6],
}

impl InertialParameters {
    pub const DIM: usize = 10;

    pub fn zero() -> Self {
        Self {
            mass: 0.0,
            first_moment: Vector3::zeros(),
            inertia: [0.0; 6],
        }
    }

    /// Body with its centre of mass at the origin.
    pub fn centered(mass: f64, inertia: Matrix3<f64>) -> Self {
        Self::rigid_payload(mass, Vector3::zeros(), inertia)
    }

    pub fn point_mass(mass: f64, offset: Vector3<f64>) -> Self {
        Self::rigid_payload(mass, offset, Matrix3::zeros())
    }

    /// Rigid payload of mass `mass` whose centre of mass sits at `com` (body
    /// frame) and whose inertia about its own centre of mass is `inertia_com`.
    pub fn rigid_payload(mass: f64, com: Vector3<f64>, inertia_com: Matrix3<f64>) -> Self {
        // parallel-axis shift to the body origin
        let shifted = inertia_com + mass * (com.dot(&com) * Matrix3::identity() - com * com.transpose());
        Self {
            mass,
            first_moment: mass * com,
            inertia: [
                shifted[(0, 0)],
                shifted[(0, 1)],
                shifted[(0, 2)],
                shifted[(1, 1)],
                shifted[(1, 2)],
                shifted[(2, 2)],
            ],
        }
    }

    pub fn from_slice(p: &[f64]) -> Self {
        assert!(p.len() >= Self::DIM, "inertial parameter slice too short");
        Self {
            mass: p[0],
            first_moment: Vector3::new(p[1], p[2], p[3]),
            inertia: [p[4], p[5], p[6], p[7], p[8], p[9]],
        }
    }

    pub fn to_vector(&self) -> SVector<f64, 10> {
        let h = self.first_moment;
        let i = self.inertia;
        SVector::<f64, 10>::from_column_slice(&[
            self.mass, h.x, h.y, h.z, i[0], i[1], i[2], i[3], i[4], i[5],
        ])
    }

    pub fn rotational_inertia(&self) -> Matrix3<f64> {
        let i = self.inertia;
        Matrix3::new(i[0], i[1], i[2], i[1], i[3], i[4], i[2], i[4], i[5])
    }

    pub fn center_of_mass(&self) -> Option<Vector3<f64>> {
        (self.mass > 0.0).then(|| self.first_moment / self.mass)
    }

    /// Inertia about the centre of mass (undoes the parallel-axis shift).
    pub fn inertia_about_com(&self) -> Option<Matrix3<f64>> {
        let c = self.center_of_mass()?;
        Some(
            self.rotational_inertia()
                - self.mass * (c.dot(&c) * Matrix3::identity() - c * c.transpose()),
        )
    }

    /// Parameters of two bodies rigidly joined at the same origin.
    pub fn plus(&self, other: &Self) -> Self {
        let mut inertia = self.inertia;
        for (a, b) in inertia.iter_mut().zip(other.inertia) {
            *a += b;
        }
        Self {
            mass: self.mass + other.mass,
            first_moment: self.first_moment + other.first_moment,
            inertia,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mass: k * self.mass,
            first_moment: k * self.first_moment,
            inertia: self.inertia.map(|x| k * x),
        }
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        if !self.mass.is_finite() || self.mass < 0.0 {
            return Err(MechanicsError::InvalidInertia(format!(
                "mass must be non-negative, got {}",
                self.mass
            )));
        }
        if self.mass == 0.0 {
            if self.first_moment.norm() > 0.0 {
                return Err(MechanicsError::InvalidInertia(
                    "massless body with a non-zero first moment".into(),
                ));
            }
            return Ok(());
        }
        let ic = self.inertia_about_com().expect("mass > 0");
        let min_ev = ic.symmetric_eigen().eigenvalues.min();
        if min_ev < -1e-9 * ic.amax().max(1.0) {
            return Err(MechanicsError::InvalidInertia(format!(
                "inertia about the centre of mass is not positive semidefinite (eigenvalue {min_ev:.3e})"
            )));
        }
        Ok(())
    }
}

impl Default for InertialParameters {
    fn default() -> Self {
        Self::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_axis_round_trip() {
        let ic = Matrix3::new(0.2, 0.01, 0.0, 0.01, 0.3, -0.02, 0.0, -0.02, 0.25);
        let p = InertialParameters::rigid_payload(4.0, Vector3::new(0.3, -0.1, 0.05), ic);
        assert!((p.inertia_about_com().unwrap() - ic).norm() < 1e-12);
        assert!(p.validate().is_ok());
        let back = InertialParameters::from_slice(p.to_vector().as_slice());
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_negative_mass_and_indefinite_inertia() {
        let mut p = InertialParameters::point_mass(1.0, Vector3::zeros());
        p.mass = -1.0;
        assert!(p.validate().is_err());
        let bad = InertialParameters::rigid_payload(
            1.0,
            Vector3::zeros(),
            Matrix3::from_diagonal(&Vector3::new(1.0, -0.5, 1.0)),
        );
        assert!(bad.validate().is_err());
    }
}
