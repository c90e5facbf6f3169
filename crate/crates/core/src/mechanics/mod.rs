//! Mechanical systems of the form `M(q) v̇ + C(q, v) v + g(q) + τ_u = S(q) τ`
//! with a linearly parametrized uncertainty `τ_u = Y_u π_u`.

mod arm;
mod inertia;
mod plant;
mod rigid_body;
pub mod rotation;

pub use arm::{PlanarLink, TwoLinkArm};
pub use inertia::InertialParameters;
pub use plant::{true_forward_dynamics, PlantTruth};
pub use rigid_body::{gravity_world, rigid_body_regressor, Actuation, FloatingBody, RigidBodyTerms};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Standard gravity magnitude [m/s²].
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanicsError {
    #[error("pitch {pitch:.6} rad is within {margin} rad of the Euler-angle singularity")]
    ChartSingularity { pitch: f64, margin: f64 },
    #[error("combined inertia matrix is not positive definite")]
    SingularInertia,
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid inertial parameters: {0}")]
    InvalidInertia(String),
}

/// Generalized positions and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl GeneralizedState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    /// Split a stacked `(q, v)` vector.
    pub fn from_stacked(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            v: x.rows(n, n).into_owned(),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let n = self.q.len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.v);
        x
    }
}

/// `M`, `C`, `g` and `S` evaluated at one state.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
    pub selection: DMatrix<f64>,
}

impl DynamicsTerms {
    /// `M a + C b + g`.
    pub fn inverse_dynamics(&self, accel: &DVector<f64>, vel: &DVector<f64>) -> DVector<f64> {
        &self.mass * accel + &self.coriolis * vel + &self.gravity
    }

    /// Sum of two term sets sharing the same actuation.
    pub fn combined(&self, other: &DynamicsTerms) -> DynamicsTerms {
        DynamicsTerms {
            mass: &self.mass + &other.mass,
            coriolis: &self.coriolis + &other.coriolis,
            gravity: &self.gravity + &other.gravity,
            selection: self.selection.clone(),
        }
    }
}

/// A mechanical system split into a nominal part and an uncertain part that is
/// linear in the parameter vector `π_u`.
///
/// The Coriolis matrices use the Christoffel-consistent factorization, so
/// `Ṁ - 2C` is skew-symmetric for both parts.
pub trait MechanicalModel: Send + Sync {
    /// Number of generalized coordinates `n`.
    fn dof(&self) -> usize;
    /// Number of actuation inputs `m`.
    fn input_dim(&self) -> usize;
    /// Dimension `p` of the uncertain parameter vector.
    fn param_dim(&self) -> usize;

    fn check_chart(&self, _q: &DVector<f64>) -> Result<(), MechanicsError> {
        Ok(())
    }

    /// `q̇` as a function of `(q, v)`.
    fn position_rate(&self, state: &GeneralizedState) -> DVector<f64>;

    /// Nominal `M_n`, `C_n`, `g_n`, `S`.
    fn nominal_terms(&self, state: &GeneralizedState) -> Result<DynamicsTerms, MechanicsError>;

    /// `M_u`, `C_u`, `g_u` of the uncertain part for parameters `pi`.
    fn uncertain_terms(
        &self,
        state: &GeneralizedState,
        pi: &DVector<f64>,
    ) -> Result<DynamicsTerms, MechanicsError>;

    /// Slotine-Li regressor `Y_u(q, v, v_r, v̇_r)` with
    /// `Y_u π = M_u(π) v̇_r + C_u(q, v; π) v_r + g_u(π)`.
    fn regressor_reference(
        &self,
        state: &GeneralizedState,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> Result<DMatrix<f64>, MechanicsError>;

    /// `Y_u(q, v, v̇)`: the regressor evaluated along the actual motion.
    fn regressor_accel(
        &self,
        state: &GeneralizedState,
        accel: &DVector<f64>,
    ) -> Result<DMatrix<f64>, MechanicsError> {
        self.regressor_reference(state, &state.v, accel)
    }

    /// `Y_n π_n = M_n v̇_r + C_n v_r + g_n`.
    fn nominal_product(
        &self,
        state: &GeneralizedState,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> Result<DVector<f64>, MechanicsError> {
        Ok(self.nominal_terms(state)?.inverse_dynamics(vr_dot, vr))
    }
}

/// Nominal forward dynamics `v̇ = M_n⁻¹ (S τ - C_n v - g_n - extra)`.
pub fn nominal_forward_dynamics<M: MechanicalModel + ?Sized>(
    model: &M,
    state: &GeneralizedState,
    tau: &DVector<f64>,
    extra_load: Option<&DVector<f64>>,
) -> Result<DVector<f64>, MechanicsError> {
    let terms = model.nominal_terms(state)?;
    let mut rhs = &terms.selection * tau - &terms.coriolis * &state.v - &terms.gravity;
    if let Some(load) = extra_load {
        rhs -= load;
    }
    terms
        .mass
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(MechanicsError::SingularInertia)
}

pub fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), MechanicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(MechanicsError::Dimension {
            what,
            expected,
            got,
        })
    }
}
