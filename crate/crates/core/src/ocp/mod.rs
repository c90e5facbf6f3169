//! Finite-horizon optimal control: problem container, multiple-shooting
//! transcription, Gauss-Newton SQP with a Riccati backward pass, and LQR
//! terminal costs.

mod barrier;
mod riccati;
mod sqp;
mod transcription;

pub use barrier::{relaxed_barrier, relaxed_barrier_curvature, relaxed_barrier_slope, RelaxedBarrierConfig};
pub use riccati::{certainty_equivalence_split, dare_residual, linearize_discrete, lqr_terminal_cost, solve_dare, spectral_radius, TerminalCost};
pub use sqp::{solve_sqp, SolverResult, SqpSettings};
pub use transcription::{MultipleShootingNlp, StageLinearization, Linearization, Trajectory};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{asymmetry, min_symmetric_eigenvalue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid problem definition: {0}")]
    Definition(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mode schedule does not cover t = {0}")]
    ScheduleGap(f64),
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error("linearization is not stabilizable (closed-loop spectral radius {0:.4})")]
    NotStabilizable(f64),
    #[error("Riccati iteration did not converge")]
    RiccatiDiverged,
    #[error("point ({residual:.3e}) is not an equilibrium of the flow")]
    NotEquilibrium { residual: f64 },
    #[error("disturbance is not matched by the actuation (residual {0:.3e})")]
    Unmatched(f64),
}

/// Time and active mode of one shooting node or interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeContext {
    pub time: f64,
    pub mode: usize,
}

/// Problem-specific parts of the OCP, evaluated per node.
pub trait OcpModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Continuous-time flow `ẋ = f(x, u)` in the mode of `ctx`.
    fn flow(&self, ctx: &NodeContext, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError>;

    fn state_reference(&self, ctx: &NodeContext) -> DVector<f64>;

    fn input_reference(&self, ctx: &NodeContext) -> DVector<f64>;

    /// State-only equalities `g₁(x) = 0`.
    fn state_equalities(&self, _ctx: &NodeContext, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// State-input equalities `g₂(x, u) = 0`.
    fn input_equalities(&self, _ctx: &NodeContext, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// Inequalities `h(x, u) ≥ 0`, handled by the relaxed barrier.
    fn inequalities(&self, _ctx: &NodeContext, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
}

/// Piecewise-constant mode sequence in absolute time.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSchedule {
    pub switch_times: Vec<f64>,
    pub modes: Vec<usize>,
    /// Schedule valid on `[start, end)`.
    pub start: f64,
    pub end: f64,
}

impl ModeSchedule {
    pub fn single(mode: usize) -> Self {
        Self {
            switch_times: Vec::new(),
            modes: vec![mode],
            start: f64::NEG_INFINITY,
            end: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.modes.len() != self.switch_times.len() + 1 {
            return Err(OcpError::Definition(format!(
                "{} modes for {} switching times",
                self.modes.len(),
                self.switch_times.len()
            )));
        }
        if self.switch_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(OcpError::Definition("switching times must increase strictly".into()));
        }
        if let (Some(first), Some(last)) = (self.switch_times.first(), self.switch_times.last()) {
            if *first <= self.start || *last >= self.end {
                return Err(OcpError::Definition("switching times must lie inside the schedule".into()));
            }
        }
        Ok(())
    }

    pub fn mode_at(&self, t: f64) -> Result<usize, OcpError> {
        if t < self.start - 1e-12 || t > self.end + 1e-12 {
            return Err(OcpError::ScheduleGap(t));
        }
        let idx = self.switch_times.partition_point(|&s| s <= t);
        Ok(self.modes[idx])
    }
}

/// Finite-horizon OCP with quadratic tracking stage cost
/// `½(x - x_ref)ᵀ Q (x - x_ref) + ½(u - u_ref)ᵀ R (u - u_ref)`.
#[derive(Clone)]
pub struct OcpDefinition {
    pub horizon: f64,
    pub nodes: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: Option<TerminalCost>,
    pub barrier: RelaxedBarrierConfig,
    pub schedule: ModeSchedule,
    pub model: Arc<dyn OcpModel>,
}

impl std::fmt::Debug for OcpDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpDefinition")
            .field("horizon", &self.horizon)
            .field("nodes", &self.nodes)
            .field("terminal", &self.terminal.is_some())
            .field("barrier", &self.barrier)
            .finish()
    }
}

impl OcpDefinition {
    pub fn interval(&self) -> f64 {
        self.horizon / (self.nodes - 1) as f64
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let (nx, nu) = (self.model.state_dim(), self.model.input_dim());
        let mut problems = Vec::new();
        if !(self.horizon > 0.0) {
            problems.push("horizon must be positive".to_string());
        }
        if self.nodes < 2 {
            problems.push("at least two nodes are required".to_string());
        }
        if self.q.shape() != (nx, nx) {
            problems.push(format!("Q must be {nx}×{nx}"));
        } else if asymmetry(&self.q) > 1e-12 * self.q.amax().max(1.0) || min_symmetric_eigenvalue(&self.q) < -1e-12 {
            problems.push("Q must be symmetric positive semidefinite".to_string());
        }
        if self.r.shape() != (nu, nu) {
            problems.push(format!("R must be {nu}×{nu}"));
        } else if asymmetry(&self.r) > 1e-12 * self.r.amax().max(1.0) || min_symmetric_eigenvalue(&self.r) <= 0.0 {
            problems.push("R must be symmetric positive definite".to_string());
        }
        if !self.barrier.is_valid() {
            problems.push("barrier parameters must be positive".to_string());
        }
        if let Some(t) = &self.terminal {
            if t.p.shape() != (nx, nx) {
                problems.push(format!("terminal P must be {nx}×{nx}"));
            }
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(OcpError::Definition(problems.join("; ")))
        }
    }
}

/// Central finite-difference Jacobian of `f` at `x`, step scaled per entry.
pub fn finite_difference_jacobian<F>(x: &DVector<f64>, step: f64, mut f: F) -> Result<DMatrix<f64>, OcpError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, OcpError>,
{
    let mut cols = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        cols.push((plus - minus) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(f(x)?.len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}
