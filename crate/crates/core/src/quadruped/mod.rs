//! Single-rigid-body quadruped: base dynamics driven by scheduled point
//! contacts, with an adaptive base wrench built from the inertial regressor of
//! an unknown rigid payload plus a constant force/torque.
//!
//! State `x = (p, θ, v_p, ω)`: CoM position and velocity in the world frame,
//! ZYX Euler angles, angular velocity in the base frame. Input: one base-frame
//! force per foot, ordered LF, RF, LH, RH.

mod ocp;
mod schedule;

pub use ocp::{ClfSettings, PredictionModel, QuadrupedOcpModel};
pub use schedule::{ContactMode, ContactSchedule, StaticWalk, FOOT_NAMES};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};
use thiserror::Error;

use crate::clf::FloatingSliding;
use crate::mechanics::rotation::{check_pitch, euler_rate_map, rotation_zyx};
use crate::mechanics::{
    check_dim, gravity_world, rigid_body_regressor, Actuation, DynamicsTerms, FloatingBody, GeneralizedState, InertialParameters,
    MechanicalModel, MechanicsError, RigidBodyTerms,
};

pub const FEET: usize = 4;
pub const STATE_DIM: usize = 12;
pub const INPUT_DIM: usize = 3 * FEET;
/// Ten payload inertial parameters followed by a world-frame force and a base-frame torque.
pub const ADAPTIVE_DIM: usize = InertialParameters::DIM + 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadrupedError {
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error("no foot is in contact")]
    NoStance,
    #[error("invalid contact schedule: {0}")]
    Schedule(String),
    #[error("invalid nominal body: {0}")]
    Body(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadrupedState {
    pub p: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub vp: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl QuadrupedState {
    pub fn at_rest(p: Vector3<f64>, theta: Vector3<f64>) -> Self {
        Self {
            p,
            theta,
            vp: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        assert!(x.len() >= STATE_DIM, "quadruped state needs 12 entries");
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            theta: Vector3::new(x[3], x[4], x[5]),
            vp: Vector3::new(x[6], x[7], x[8]),
            omega: Vector3::new(x[9], x[10], x[11]),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, STATE_DIM> {
        let mut x = SVector::<f64, STATE_DIM>::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.theta);
        x.fixed_rows_mut::<3>(6).copy_from(&self.vp);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.to_vector().as_slice())
    }

    pub fn q(&self) -> Vector6<f64> {
        Vector6::new(self.p.x, self.p.y, self.p.z, self.theta.x, self.theta.y, self.theta.z)
    }

    pub fn v(&self) -> Vector6<f64> {
        Vector6::new(self.vp.x, self.vp.y, self.vp.z, self.omega.x, self.omega.y, self.omega.z)
    }

    pub fn generalized(&self) -> GeneralizedState {
        GeneralizedState::new(
            DVector::from_column_slice(self.q().as_slice()),
            DVector::from_column_slice(self.v().as_slice()),
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_zyx(&self.theta)
    }

    pub fn check_chart(&self) -> Result<(), MechanicsError> {
        check_pitch(&self.theta)
    }

    /// `(v_p, T(θ) ω)`.
    pub fn position_rate(&self) -> Vector6<f64> {
        let rates = euler_rate_map(&self.theta) * self.omega;
        Vector6::new(self.vp.x, self.vp.y, self.vp.z, rates.x, rates.y, rates.z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Contact force per foot, base frame [N].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadrupedInput {
    pub forces: [Vector3<f64>; FEET],
}

impl QuadrupedInput {
    pub fn zero() -> Self {
        Self {
            forces: [Vector3::zeros(); FEET],
        }
    }

    pub fn from_slice(u: &[f64]) -> Self {
        assert!(u.len() >= INPUT_DIM, "quadruped input needs 12 entries");
        let mut forces = [Vector3::zeros(); FEET];
        for (i, f) in forces.iter_mut().enumerate() {
            *f = Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]);
        }
        Self { forces }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(INPUT_DIM, self.forces.iter().flat_map(|f| [f.x, f.y, f.z]))
    }
}

/// Payload inertial parameters and constant wrench.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveWrenchParams {
    pub pi_in: InertialParameters,
    /// World-frame force [N] then base-frame torque [N·m], entering the
    /// dynamics with the same sign as a load.
    pub pi_f: Vector6<f64>,
}

impl AdaptiveWrenchParams {
    pub fn zero() -> Self {
        Self {
            pi_in: InertialParameters::zero(),
            pi_f: Vector6::zeros(),
        }
    }

    /// Rigid payload plus an external force `external_world` acting at the CoM.
    pub fn from_truth(payload: InertialParameters, external_world: Vector3<f64>) -> Self {
        let mut pi_f = Vector6::zeros();
        pi_f.fixed_rows_mut::<3>(0).copy_from(&(-external_world));
        Self { pi_in: payload, pi_f }
    }

    pub fn from_slice(p: &[f64]) -> Self {
        assert!(p.len() >= ADAPTIVE_DIM, "adaptive parameters need 16 entries");
        Self {
            pi_in: InertialParameters::from_slice(&p[..10]),
            pi_f: Vector6::from_column_slice(&p[10..16]),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, ADAPTIVE_DIM> {
        let mut v = SVector::<f64, ADAPTIVE_DIM>::zeros();
        v.fixed_rows_mut::<10>(0).copy_from(&self.pi_in.to_vector());
        v.fixed_rows_mut::<6>(10).copy_from(&self.pi_f);
        v
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.to_vector().as_slice())
    }
}

/// `Y_u(q, v, v_r, v̇_r)` (6×16) in generalized coordinates: the inertial
/// regressor next to an identity block for the constant wrench.
pub fn adaptive_regressor(state: &QuadrupedState, vr: &Vector6<f64>, vr_dot: &Vector6<f64>) -> SMatrix<f64, 6, ADAPTIVE_DIM> {
    let mut y = SMatrix::<f64, 6, ADAPTIVE_DIM>::zeros();
    y.fixed_view_mut::<6, 10>(0, 0)
        .copy_from(&rigid_body_regressor(&state.rotation(), &state.omega, vr, vr_dot));
    y.fixed_view_mut::<6, 6>(0, 10).copy_from(&SMatrix::<f64, 6, 6>::identity());
    y
}

/// Generalized adaptive force `Y_u π` (world force, base torque).
pub fn adaptive_generalized_force(
    state: &QuadrupedState,
    vr: &Vector6<f64>,
    vr_dot: &Vector6<f64>,
    pi: &SVector<f64, ADAPTIVE_DIM>,
) -> Vector6<f64> {
    if pi.iter().all(|&x| x == 0.0) {
        return Vector6::zeros();
    }
    adaptive_regressor(state, vr, vr_dot) * pi
}

/// `(f_u, t_u)` with `f_u` in the base frame.
pub fn adaptive_wrench(state: &QuadrupedState, sliding: &FloatingSliding, pi: &AdaptiveWrenchParams) -> Vector6<f64> {
    let g = adaptive_generalized_force(state, &sliding.vr, &sliding.vr_dot, &pi.to_vector());
    let f = state.rotation().transpose() * g.fixed_rows::<3>(0);
    Vector6::new(f.x, f.y, f.z, g[3], g[4], g[5])
}

/// Nominal body: mass and inertia about the CoM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NominalBody {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
}

impl NominalBody {
    pub fn new(mass: f64, inertia: Matrix3<f64>) -> Result<Self, QuadrupedError> {
        if !(mass > 0.0) {
            return Err(QuadrupedError::Body(format!("mass must be positive, got {mass}")));
        }
        let inertia_inv = inertia
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| QuadrupedError::Body("inertia must be positive definite".into()))?;
        Ok(Self {
            mass,
            inertia,
            inertia_inv,
        })
    }

    pub fn params(&self) -> InertialParameters {
        InertialParameters::centered(self.mass, self.inertia)
    }

    /// `v̇` from `M_n v̇ + C_n v + g_n = f` for a generalized force `f`.
    pub fn forward(&self, state: &QuadrupedState, force: &Vector6<f64>) -> Vector6<f64> {
        let lin = gravity_world() + force.fixed_rows::<3>(0) / self.mass;
        let t: Vector3<f64> = force.fixed_rows::<3>(3).into_owned();
        let ang = self.inertia_inv * (t - state.omega.cross(&(self.inertia * state.omega)));
        Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
    }

    /// `Y_n π_n = M_n v̇_r + C_n v_r + g_n`.
    pub fn inverse(&self, state: &QuadrupedState, vr: &Vector6<f64>, vr_dot: &Vector6<f64>) -> Vector6<f64> {
        let a_lin = vr_dot.fixed_rows::<3>(0) - gravity_world();
        let w_r: Vector3<f64> = vr.fixed_rows::<3>(3).into_owned();
        let a_ang: Vector3<f64> = vr_dot.fixed_rows::<3>(3).into_owned();
        let ang = self.inertia * a_ang + w_r.cross(&(self.inertia * state.omega));
        let lin = a_lin * self.mass;
        Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
    }
}

/// Generalized force `S λ` of the stance-foot forces.
pub fn contact_wrench(state: &QuadrupedState, input: &QuadrupedInput, mode: &ContactMode) -> Vector6<f64> {
    let r = state.rotation();
    let rt = r.transpose();
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for i in 0..FEET {
        if !mode.contact[i] {
            continue;
        }
        let lambda = input.forces[i];
        force += r * lambda;
        torque += (rt * (mode.feet[i] - state.p)).cross(&lambda);
    }
    Vector6::new(force.x, force.y, force.z, torque.x, torque.y, torque.z)
}

/// `S(q)` (6×12) for the stance feet of `mode`.
pub fn selection_matrix(state: &QuadrupedState, mode: &ContactMode) -> DMatrix<f64> {
    let body = FloatingBody::new(
        InertialParameters::zero(),
        Actuation::Contacts {
            feet: mode.feet.to_vec(),
            active: mode.contact.to_vec(),
        },
    );
    body.selection_matrix(&DVector::from_column_slice(state.q().as_slice()))
}

fn stack_rate(state: &QuadrupedState, accel: &Vector6<f64>) -> SVector<f64, STATE_DIM> {
    let mut dx = SVector::<f64, STATE_DIM>::zeros();
    dx.fixed_rows_mut::<6>(0).copy_from(&state.position_rate());
    dx.fixed_rows_mut::<6>(6).copy_from(accel);
    dx
}

/// Adaptive kino-dynamic flow: the nominal single-rigid-body dynamics with
/// `-Y_u(q, v, v_r, v̇_r) π̂` added as a generalized force.
pub fn adaptive_flow(
    state: &QuadrupedState,
    input: &QuadrupedInput,
    pi_hat: &AdaptiveWrenchParams,
    body: &NominalBody,
    mode: &ContactMode,
    sliding: &FloatingSliding,
) -> Result<SVector<f64, STATE_DIM>, MechanicsError> {
    state.check_chart()?;
    let mut force = contact_wrench(state, input, mode);
    let pi = pi_hat.to_vector();
    if pi.iter().any(|&x| x != 0.0) {
        force -= adaptive_generalized_force(state, &sliding.vr, &sliding.vr_dot, &pi);
    }
    Ok(stack_rate(state, &body.forward(state, &force)))
}

/// Flow of the true plant: nominal body plus a rigid payload, loaded by the
/// constant wrench `π_f`, driven by the generalized force `actuation`.
pub fn true_flow(
    state: &QuadrupedState,
    actuation: &Vector6<f64>,
    body: &NominalBody,
    truth: &AdaptiveWrenchParams,
) -> Result<SVector<f64, STATE_DIM>, MechanicsError> {
    state.check_chart()?;
    let params = body.params().plus(&truth.pi_in);
    let terms = RigidBodyTerms::new(&params, &state.rotation(), &state.omega);
    let rhs = actuation - truth.pi_f - terms.coriolis * state.v() - terms.gravity;
    let accel = terms
        .mass
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(MechanicsError::SingularInertia)?;
    Ok(stack_rate(state, &accel))
}

/// Smoothed friction cone `μ f_z - sqrt(f_x² + f_y² + ε²) + ε ≥ 0` and
/// `f_z ≥ 0` per stance foot, with the force expressed in the contact frame.
pub fn friction_cone_constraints(
    input: &QuadrupedInput,
    mode: &ContactMode,
    mu: f64,
    rotation: &Matrix3<f64>,
    smoothing: f64,
) -> Vec<f64> {
    let mut h = Vec::with_capacity(2 * FEET);
    for i in 0..FEET {
        if !mode.contact[i] {
            continue;
        }
        let f = mode.terrain * (rotation * input.forces[i]);
        h.push(mu * f.z - (f.x * f.x + f.y * f.y + smoothing * smoothing).sqrt() + smoothing);
        h.push(f.z);
    }
    h
}

/// Equal split among the stance feet of the world force
/// `m (a_ref - g) + compensation`, returned in the base frame of `rotation`.
pub fn weight_distribution_reference(
    mode: &ContactMode,
    mass: f64,
    reference_accel: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    compensation: &Vector3<f64>,
) -> Result<QuadrupedInput, QuadrupedError> {
    let n = mode.stance_count();
    if n == 0 {
        return Err(QuadrupedError::NoStance);
    }
    let total = mass * (reference_accel - gravity_world()) + compensation;
    let per_foot = rotation.transpose() * (total / n as f64);
    let mut input = QuadrupedInput::zero();
    for i in 0..FEET {
        if mode.contact[i] {
            input.forces[i] = per_foot;
        }
    }
    Ok(input)
}

/// Floating body whose uncertain part is the 16-parameter adaptive wrench,
/// actuated by a generalized wrench.
#[derive(Clone, Debug)]
pub struct AdaptiveBody {
    inner: FloatingBody,
}

impl AdaptiveBody {
    pub fn new(body: &NominalBody) -> Self {
        Self {
            inner: FloatingBody::new(body.params(), Actuation::Wrench),
        }
    }
}

impl MechanicalModel for AdaptiveBody {
    fn dof(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        6
    }

    fn param_dim(&self) -> usize {
        ADAPTIVE_DIM
    }

    fn check_chart(&self, q: &DVector<f64>) -> Result<(), MechanicsError> {
        self.inner.check_chart(q)
    }

    fn position_rate(&self, state: &GeneralizedState) -> DVector<f64> {
        self.inner.position_rate(state)
    }

    fn nominal_terms(&self, state: &GeneralizedState) -> Result<DynamicsTerms, MechanicsError> {
        self.inner.nominal_terms(state)
    }

    fn uncertain_terms(&self, state: &GeneralizedState, pi: &DVector<f64>) -> Result<DynamicsTerms, MechanicsError> {
        check_dim("adaptive parameters", ADAPTIVE_DIM, pi.len())?;
        let mut terms = self.inner.uncertain_terms(state, &pi.rows(0, 10).into_owned())?;
        terms.gravity += pi.rows(10, 6);
        Ok(terms)
    }

    fn regressor_reference(
        &self,
        state: &GeneralizedState,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> Result<DMatrix<f64>, MechanicsError> {
        let y_in = self.inner.regressor_reference(state, vr, vr_dot)?;
        let mut y = DMatrix::zeros(6, ADAPTIVE_DIM);
        y.view_mut((0, 0), (6, 10)).copy_from(&y_in);
        y.view_mut((0, 10), (6, 6)).fill_with_identity();
        Ok(y)
    }
}
