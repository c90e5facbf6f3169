//! Planar two-link manipulator moving in a vertical plane, gravity along `-y`.
//!
//! Joint angles are measured from the world `x` axis (`q1`) and from link 1
//! (`q2`). Each link is described in its own frame (x along the link) by
//! `(m, m·c_x, m·c_y, I)` with `I` taken about the link's joint.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::{check_dim, DynamicsTerms, GeneralizedState, MechanicalModel, MechanicsError, GRAVITY};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarLink {
    pub mass: f64,
    pub first_moment: Vector2<f64>,
    /// Inertia about the joint axis [kg·m²].
    pub inertia: f64,
}

impl PlanarLink {
    pub const DIM: usize = 4;

    pub fn zero() -> Self {
        Self {
            mass: 0.0,
            first_moment: Vector2::zeros(),
            inertia: 0.0,
        }
    }

    /// Uniform slender rod of length `length` hinged at one end.
    pub fn uniform_rod(mass: f64, length: f64) -> Self {
        Self {
            mass,
            first_moment: Vector2::new(0.5 * mass * length, 0.0),
            inertia: mass * length * length / 3.0,
        }
    }

    /// Point mass at `offset` in the link frame.
    pub fn point_mass(mass: f64, offset: Vector2<f64>) -> Self {
        Self {
            mass,
            first_moment: mass * offset,
            inertia: mass * offset.norm_squared(),
        }
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self {
            mass: p[0],
            first_moment: Vector2::new(p[1], p[2]),
            inertia: p[3],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.mass, self.first_moment.x, self.first_moment.y, self.inertia])
    }

    pub fn add(&self, other: &PlanarLink) -> PlanarLink {
        PlanarLink {
            mass: self.mass + other.mass,
            first_moment: self.first_moment + other.first_moment,
            inertia: self.inertia + other.inertia,
        }
    }
}

/// Two-link arm whose uncertain part is a payload rigidly attached to link 2.
#[derive(Clone, Debug)]
pub struct TwoLinkArm {
    pub length1: f64,
    pub link1: PlanarLink,
    pub link2: PlanarLink,
}

impl Default for TwoLinkArm {
    /// 1 m, 1 kg uniform rods.
    fn default() -> Self {
        Self {
            length1: 1.0,
            link1: PlanarLink::uniform_rod(1.0, 1.0),
            link2: PlanarLink::uniform_rod(1.0, 1.0),
        }
    }
}

impl TwoLinkArm {
    /// `M`, `C`, `g` for arbitrary link parameters (linear in both links).
    pub fn terms_for(
        &self,
        link1: &PlanarLink,
        link2: &PlanarLink,
        q: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (Matrix2<f64>, Matrix2<f64>, Vector2<f64>) {
        let l1 = self.length1;
        let (s1, c1) = q[0].sin_cos();
        let (s2, c2) = q[1].sin_cos();
        let (sp, cp) = (q[0] + q[1]).sin_cos();
        let h2 = link2.first_moment;
        let coupling = h2.x * c2 - h2.y * s2;
        let dcoupling = -h2.x * s2 - h2.y * c2;

        let m22 = link2.inertia;
        let m12 = m22 + l1 * coupling;
        let m11 = link1.inertia + link2.mass * l1 * l1 + m22 + 2.0 * l1 * coupling;
        let mass = Matrix2::new(m11, m12, m12, m22);

        let a = l1 * dcoupling;
        let coriolis = Matrix2::new(a * v[1], a * (v[0] + v[1]), -a * v[0], 0.0);

        let h1 = link1.first_moment;
        let g2 = GRAVITY * (h2.x * cp - h2.y * sp);
        let g1 = GRAVITY * (h1.x * c1 - h1.y * s1 + link2.mass * l1 * c1) + g2;
        (mass, coriolis, Vector2::new(g1, g2))
    }

    /// Regressor columns for the four parameters of a body attached to link 2.
    pub fn link2_regressor(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> DMatrix<f64> {
        let l1 = self.length1;
        let (_, c1) = q[0].sin_cos();
        let (s2, c2) = q[1].sin_cos();
        let (sp, cp) = (q[0] + q[1]).sin_cos();
        let (a1, a2) = (vr_dot[0], vr_dot[1]);
        let (b1, b2) = (vr[0], vr[1]);
        let vel_term = v[1] * b1 + (v[0] + v[1]) * b2;
        let g = GRAVITY;
        DMatrix::from_row_slice(
            2,
            4,
            &[
                l1 * l1 * a1 + g * l1 * c1,
                2.0 * l1 * c2 * a1 + l1 * c2 * a2 - l1 * s2 * vel_term + g * cp,
                -2.0 * l1 * s2 * a1 - l1 * s2 * a2 - l1 * c2 * vel_term - g * sp,
                a1 + a2,
                0.0,
                l1 * c2 * a1 + l1 * s2 * v[0] * b1 + g * cp,
                -l1 * s2 * a1 + l1 * c2 * v[0] * b1 - g * sp,
                a1 + a2,
            ],
        )
    }

    fn dynamic_terms(&self, link1: &PlanarLink, link2: &PlanarLink, state: &GeneralizedState) -> DynamicsTerms {
        let (m, c, g) = self.terms_for(link1, link2, &state.q, &state.v);
        DynamicsTerms {
            mass: DMatrix::from_iterator(2, 2, m.iter().copied()),
            coriolis: DMatrix::from_iterator(2, 2, c.iter().copied()),
            gravity: DVector::from_iterator(2, g.iter().copied()),
            selection: DMatrix::identity(2, 2),
        }
    }

    fn validate(&self, state: &GeneralizedState) -> Result<(), MechanicsError> {
        check_dim("q", 2, state.q.len())?;
        check_dim("v", 2, state.v.len())
    }
}

impl MechanicalModel for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        PlanarLink::DIM
    }

    fn position_rate(&self, state: &GeneralizedState) -> DVector<f64> {
        state.v.clone()
    }

    fn nominal_terms(&self, state: &GeneralizedState) -> Result<DynamicsTerms, MechanicsError> {
        self.validate(state)?;
        Ok(self.dynamic_terms(&self.link1, &self.link2, state))
    }

    fn uncertain_terms(
        &self,
        state: &GeneralizedState,
        pi: &DVector<f64>,
    ) -> Result<DynamicsTerms, MechanicsError> {
        self.validate(state)?;
        check_dim("payload parameters", 4, pi.len())?;
        Ok(self.dynamic_terms(&PlanarLink::zero(), &PlanarLink::from_slice(pi.as_slice()), state))
    }

    fn regressor_reference(
        &self,
        state: &GeneralizedState,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> Result<DMatrix<f64>, MechanicsError> {
        self.validate(state)?;
        check_dim("v_r", 2, vr.len())?;
        check_dim("v̇_r", 2, vr_dot.len())?;
        Ok(self.link2_regressor(&state.q, &state.v, vr, vr_dot))
    }
}
