//! Controller variants compared in the experiments and the generalized
//! momentum observer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SVector, Vector3, Vector6};
use thiserror::Error;

use crate::clf::{floating_sliding, AdaptiveEstimate, ClfError, FloatingSliding, ReferenceSignal, SlidingSurfaceState};
use crate::ocp::{
    lqr_terminal_cost, solve_sqp, MultipleShootingNlp, NodeContext, OcpDefinition, OcpError, OcpModel, RelaxedBarrierConfig,
    SqpSettings, TerminalCost, Trajectory,
};
use crate::parallel::Execution;
use crate::quadruped::{
    adaptive_regressor, AdaptiveWrenchParams, ClfSettings, ContactSchedule, NominalBody, PredictionModel, QuadrupedInput,
    QuadrupedOcpModel, QuadrupedState, ADAPTIVE_DIM, INPUT_DIM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("variant {0} needs the plant truth")]
    MissingTruth(ControllerVariant),
    #[error("unknown controller variant '{0}'")]
    UnknownVariant(String),
    #[error("observer gain is not positive definite")]
    ObserverGain,
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Clf(#[from] ClfError),
    #[error("solver returned a non-finite input")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControllerVariant {
    AclfMpc,
    AclfMpcNoTerminal,
    ClfMpcNoAdaptation,
    PerfectModelMpc,
    PerfectModelMpcNoTerminal,
    NominalMpc,
    MomentumObserverMpc,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 7] = [
        Self::AclfMpc,
        Self::AclfMpcNoTerminal,
        Self::ClfMpcNoAdaptation,
        Self::PerfectModelMpc,
        Self::PerfectModelMpcNoTerminal,
        Self::NominalMpc,
        Self::MomentumObserverMpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AclfMpc => "AclfMpc",
            Self::AclfMpcNoTerminal => "AclfMpcNoTerminal",
            Self::ClfMpcNoAdaptation => "ClfMpcNoAdaptation",
            Self::PerfectModelMpc => "PerfectModelMpc",
            Self::PerfectModelMpcNoTerminal => "PerfectModelMpcNoTerminal",
            Self::NominalMpc => "NominalMpc",
            Self::MomentumObserverMpc => "MomentumObserverMpc",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::AclfMpc => "adaptive dynamics, adaptive CLF constraint, LQR terminal cost",
            Self::AclfMpcNoTerminal => "adaptive dynamics, adaptive CLF constraint, no terminal cost",
            Self::ClfMpcNoAdaptation => "nominal dynamics, CLF constraint of the nominal model, LQR terminal cost",
            Self::PerfectModelMpc => "true payload in the dynamics, LQR terminal cost",
            Self::PerfectModelMpcNoTerminal => "true payload in the dynamics, no terminal cost",
            Self::NominalMpc => "nominal dynamics, no constraint, LQR terminal cost",
            Self::MomentumObserverMpc => "nominal dynamics plus momentum-observer wrench, LQR terminal cost",
        }
    }

    pub fn terminal_cost(self) -> bool {
        !matches!(self, Self::AclfMpcNoTerminal | Self::PerfectModelMpcNoTerminal)
    }

    pub fn clf_constraint(self) -> bool {
        matches!(self, Self::AclfMpc | Self::AclfMpcNoTerminal | Self::ClfMpcNoAdaptation)
    }

    pub fn adapts(self) -> bool {
        matches!(self, Self::AclfMpc | Self::AclfMpcNoTerminal)
    }

    pub fn needs_truth(self) -> bool {
        matches!(self, Self::PerfectModelMpc | Self::PerfectModelMpcNoTerminal)
    }
}

impl fmt::Display for ControllerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerVariant {
    type Err = ControllerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ControllerError::UnknownVariant(s.to_string()))
    }
}

/// First-order generalized-momentum observer on the nominal body.
///
/// With `p = M_n v`, `p̂ += dt (S τ + C_nᵀ v - g_n + r)` and `r = K (p - p̂)`,
/// `r` tracks the external generalized force with first-order dynamics of
/// rate `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumObserver {
    pub momentum: Vector6<f64>,
    pub disturbance: Vector6<f64>,
    pub gain: Matrix6<f64>,
}

impl MomentumObserver {
    pub fn new(gain: Matrix6<f64>, body: &NominalBody, state: &QuadrupedState) -> Result<Self, ControllerError> {
        let sym = (gain + gain.transpose()) * 0.5;
        if (gain - gain.transpose()).amax() > 1e-12 || sym.cholesky().is_none() {
            return Err(ControllerError::ObserverGain);
        }
        Ok(Self {
            momentum: Self::measured_momentum(body, state),
            disturbance: Vector6::zeros(),
            gain,
        })
    }

    fn measured_momentum(body: &NominalBody, state: &QuadrupedState) -> Vector6<f64> {
        let lin = state.vp * body.mass;
        let ang = body.inertia * state.omega;
        Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
    }

    /// Advance over `dt` given the state at the start of the interval, the
    /// generalized actuation force applied over it and the state at its end.
    pub fn step(&mut self, body: &NominalBody, before: &QuadrupedState, actuation: &Vector6<f64>, after: &QuadrupedState, dt: f64) {
        assert!(dt > 0.0, "observer step must be positive");
        let iw = body.inertia * before.omega;
        let coriolis_t = iw.cross(&before.omega);
        let gravity = -body.mass * crate::mechanics::gravity_world();
        let mut rate = actuation + self.disturbance;
        rate[0] -= gravity.x;
        rate[1] -= gravity.y;
        rate[2] -= gravity.z;
        rate[3] += coriolis_t.x;
        rate[4] += coriolis_t.y;
        rate[5] += coriolis_t.z;
        self.momentum += rate * dt;
        self.disturbance = self.gain * (Self::measured_momentum(body, after) - self.momentum);
    }
}

/// Tuning shared by all variants.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSettings {
    pub horizon: f64,
    pub nodes: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub barrier: RelaxedBarrierConfig,
    pub sqp: SqpSettings,
    pub friction: f64,
    pub cone_smoothing: f64,
    /// Barrier input scales of the friction cones and of `h_clf`.
    pub cone_scale: f64,
    pub clf_scale: f64,
    pub clf: ClfSettings,
    pub gamma: DMatrix<f64>,
    /// Estimates are clamped to `±bound_factor·scale`.
    pub estimate_scale: DVector<f64>,
    pub bound_factor: f64,
    /// Hold the constant-torque entries of the estimate at zero.
    pub freeze_torque: bool,
    /// Keep the payload-mass estimate at or above zero.
    pub nonnegative_mass: bool,
    pub observer_gain: Matrix6<f64>,
    pub control_period: f64,
    pub execution: Execution,
}

impl ControllerSettings {
    /// Defaults for the quadruped experiments.
    pub fn quadruped_defaults() -> Self {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[
            1000.0, 1000.0, 1000.0, 200.0, 200.0, 200.0, 50.0, 50.0, 50.0, 5.0, 5.0, 5.0,
        ]));
        let mut gamma_diag = vec![5.0];
        gamma_diag.extend([1.0; 3]);
        gamma_diag.extend([0.01; 6]);
        gamma_diag.extend([1500.0; 3]);
        gamma_diag.extend([10.0; 3]);
        let mut scale = vec![6.0];
        scale.extend([2.5; 3]);
        scale.extend([0.5; 6]);
        scale.extend([30.0; 3]);
        scale.extend([10.0; 3]);
        Self {
            horizon: 1.0,
            nodes: 21,
            q,
            r: DMatrix::identity(INPUT_DIM, INPUT_DIM) * 1e-4,
            barrier: RelaxedBarrierConfig { mu: 0.1, delta: 5.0 },
            sqp: SqpSettings {
                max_iterations: 2,
                ..SqpSettings::default()
            },
            friction: 0.7,
            cone_smoothing: 0.1,
            cone_scale: 1.0,
            clf_scale: 1.0,
            clf: ClfSettings {
                lambda_linear: Matrix3::identity() * 5.0,
                lambda_rotational: Matrix3::identity() * 5.0,
                kd: Matrix6::from_diagonal(&Vector6::new(50.0, 50.0, 50.0, 10.0, 10.0, 10.0)),
            },
            gamma: DMatrix::from_diagonal(&DVector::from_vec(gamma_diag)),
            estimate_scale: DVector::from_vec(scale),
            bound_factor: 10.0,
            freeze_torque: true,
            nonnegative_mass: true,
            observer_gain: Matrix6::identity() * 20.0,
            control_period: 0.01,
            execution: Execution::Sequential,
        }
    }
}

/// What the controller computed at one control instant.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub input: QuadrupedInput,
    pub sliding: FloatingSliding,
    pub pi_hat: SVector<f64, ADAPTIVE_DIM>,
    /// Observer estimate of the external generalized force (zero otherwise).
    pub disturbance: Vector6<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub cost: f64,
    pub solve_time: f64,
}

/// Motion task shared by every variant.
#[derive(Clone)]
pub struct Task {
    pub body: NominalBody,
    pub schedule: Arc<ContactSchedule>,
    pub reference: Arc<dyn ReferenceSignal>,
}

pub struct Controller {
    pub variant: ControllerVariant,
    settings: ControllerSettings,
    task: Task,
    truth: Option<AdaptiveWrenchParams>,
    estimate: Option<AdaptiveEstimate>,
    observer: Option<MomentumObserver>,
    terminal: Option<TerminalCost>,
    warm: Option<Trajectory>,
    previous: Option<(QuadrupedState, Vector6<f64>)>,
}

/// Build a controller. `truth` is read only by the perfect-model variants.
pub fn make_controller(
    variant: ControllerVariant,
    settings: ControllerSettings,
    task: Task,
    truth: Option<AdaptiveWrenchParams>,
    initial: &QuadrupedState,
) -> Result<Controller, ControllerError> {
    let truth = if variant.needs_truth() {
        Some(truth.ok_or(ControllerError::MissingTruth(variant))?)
    } else {
        None
    };
    let estimate = if variant.adapts() {
        let mut frozen = vec![false; ADAPTIVE_DIM];
        if settings.freeze_torque {
            frozen[13..16].iter_mut().for_each(|f| *f = true);
        }
        let mut estimate = AdaptiveEstimate::new(
            DVector::zeros(ADAPTIVE_DIM),
            settings.gamma.clone(),
            &settings.estimate_scale,
            settings.bound_factor,
        )?
        .with_frozen(frozen);
        if settings.nonnegative_mass {
            estimate.lower[0] = 0.0;
        }
        Some(estimate)
    } else {
        None
    };
    let observer = match variant {
        ControllerVariant::MomentumObserverMpc => Some(MomentumObserver::new(settings.observer_gain, &task.body, initial)?),
        _ => None,
    };
    let mut controller = Controller {
        variant,
        settings,
        task,
        truth,
        estimate,
        observer,
        terminal: None,
        warm: None,
        previous: None,
    };
    if variant.terminal_cost() {
        controller.terminal = Some(controller.build_terminal_cost()?);
    }
    Ok(controller)
}

impl Controller {
    pub fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    pub fn estimate(&self) -> Option<&AdaptiveEstimate> {
        self.estimate.as_ref()
    }

    pub fn terminal(&self) -> Option<&TerminalCost> {
        self.terminal.as_ref()
    }

    fn pi_hat(&self) -> SVector<f64, ADAPTIVE_DIM> {
        self.estimate
            .as_ref()
            .map(|e| SVector::from_column_slice(e.pi_hat.as_slice()))
            .unwrap_or_else(SVector::zeros)
    }

    /// Prediction model with the current estimates.
    pub fn model(&self) -> QuadrupedOcpModel {
        let prediction = match self.variant {
            ControllerVariant::AclfMpc | ControllerVariant::AclfMpcNoTerminal => PredictionModel::Adaptive,
            ControllerVariant::ClfMpcNoAdaptation | ControllerVariant::NominalMpc => PredictionModel::Nominal,
            ControllerVariant::PerfectModelMpc | ControllerVariant::PerfectModelMpcNoTerminal => {
                PredictionModel::Perfect(self.truth.expect("checked at construction"))
            }
            ControllerVariant::MomentumObserverMpc => {
                PredictionModel::Compensated(self.observer.as_ref().map(|o| o.disturbance).unwrap_or_default())
            }
        };
        QuadrupedOcpModel {
            body: self.task.body,
            schedule: self.task.schedule.clone(),
            reference: self.task.reference.clone(),
            prediction,
            pi_hat: self.pi_hat(),
            clf: self.variant.clf_constraint().then_some(self.settings.clf),
            friction: self.settings.friction,
            cone_smoothing: self.settings.cone_smoothing,
            cone_scale: self.settings.cone_scale,
            clf_scale: self.settings.clf_scale,
            sliding_gains: (self.settings.clf.lambda_linear, self.settings.clf.lambda_rotational),
        }
    }

    fn definition(&self, model: QuadrupedOcpModel) -> OcpDefinition {
        OcpDefinition {
            horizon: self.settings.horizon,
            nodes: self.settings.nodes,
            q: self.settings.q.clone(),
            r: self.settings.r.clone(),
            terminal: self.terminal.clone(),
            barrier: self.settings.barrier,
            schedule: self.task.schedule.mode_schedule(),
            model: Arc::new(model),
        }
    }

    /// LQR value function of the prediction model linearized at the resting
    /// reference pose at the schedule start.
    fn build_terminal_cost(&self) -> Result<TerminalCost, ControllerError> {
        let model = self.model();
        let t0 = self.task.schedule.start;
        let ctx = NodeContext {
            time: t0,
            mode: self.task.schedule.mode_index(t0),
        };
        let mut x_eq = QuadrupedOcpModel::reference_state(&self.task.reference.sample(t0));
        x_eq.vp = Vector3::zeros();
        x_eq.omega = Vector3::zeros();
        let x_eq = x_eq.to_dvector();
        let u_ref = model.input_reference(&ctx);
        let u_eq = equilibrium_input(&model, &ctx, &x_eq, &u_ref)?;
        let dt = self.settings.horizon / (self.settings.nodes - 1) as f64;
        // the terminal cost only sees velocities at rest, so position rates vanish
        let flow = |x: &DVector<f64>, u: &DVector<f64>| model.flow(&ctx, x, u);
        let mut terminal = lqr_terminal_cost(flow, &self.settings.q, &self.settings.r, &x_eq, &u_eq, dt)?;
        terminal.track_reference = true;
        Ok(terminal)
    }

    /// Sliding-surface quantities of `state` at time `t`.
    pub fn sliding(&self, t: f64, state: &QuadrupedState) -> FloatingSliding {
        let sample = self.task.reference.sample(t);
        let qd = sample.orientation.unwrap_or_else(nalgebra::UnitQuaternion::identity);
        floating_sliding(
            &state.q(),
            &state.v(),
            &sample,
            &qd,
            &self.settings.clf.lambda_linear,
            &self.settings.clf.lambda_rotational,
        )
    }

    /// One control instant: update the estimate or observer, then solve the OCP.
    pub fn step(&mut self, t: f64, state: &QuadrupedState) -> Result<ControlOutput, ControllerError> {
        let sliding = self.sliding(t, state);
        let dt = self.settings.control_period;
        if let Some(est) = self.estimate.as_mut() {
            if self.previous.is_some() {
                let y = adaptive_regressor(state, &sliding.vr, &sliding.vr_dot);
                let yd = DMatrix::from_column_slice(6, ADAPTIVE_DIM, y.as_slice());
                let s = SlidingSurfaceState {
                    sigma: DVector::from_column_slice(sliding.sigma.as_slice()),
                    vr: DVector::from_column_slice(sliding.vr.as_slice()),
                    vr_dot: DVector::from_column_slice(sliding.vr_dot.as_slice()),
                    eo: sliding.eo,
                };
                est.update(&s, &yd, dt);
            }
        }
        if let (Some(obs), Some((before, actuation))) = (self.observer.as_mut(), self.previous.as_ref()) {
            obs.step(&self.task.body, before, actuation, state, dt);
        }

        let model = self.model();
        let def = self.definition(model);
        let nlp = MultipleShootingNlp::transcribe(&def, &state.to_dvector(), t)?.with_execution(self.settings.execution);
        let result = solve_sqp(&nlp, self.warm.as_ref(), &self.settings.sqp)?;
        let u = result.first_input();
        if u.iter().any(|x| !x.is_finite()) {
            return Err(ControllerError::NonFinite);
        }
        let input = QuadrupedInput::from_slice(u.as_slice());
        let mode = self.task.schedule.mode_at(t);
        let actuation = crate::quadruped::contact_wrench(state, &input, mode);
        self.previous = Some((*state, actuation));
        self.warm = Some(result.trajectory.clone());
        Ok(ControlOutput {
            input,
            sliding,
            pi_hat: self.pi_hat(),
            disturbance: self.observer.as_ref().map(|o| o.disturbance).unwrap_or_default(),
            iterations: result.iterations,
            converged: result.converged,
            kkt_residual: result.kkt_residual,
            max_violation: result.max_violation,
            cost: result.cost,
            solve_time: result.solve_time,
        })
    }
}

/// Input closest to `u_ref` that makes `x` a rest point of the prediction
/// model (the acceleration is affine in the input).
fn equilibrium_input(model: &QuadrupedOcpModel, ctx: &NodeContext, x: &DVector<f64>, u_ref: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
    let accel = |u: &DVector<f64>| -> Result<DVector<f64>, OcpError> { Ok(model.flow(ctx, x, u)?.rows(6, 6).into_owned()) };
    let a0 = accel(u_ref)?;
    let j = crate::ocp::finite_difference_jacobian(u_ref, 1e-3, accel)?;
    let mut ju = j.clone();
    // swing feet carry no force
    let swing = model.input_equalities(ctx, x, u_ref);
    if !swing.is_empty() {
        let mode = &model.schedule.modes[ctx.mode];
        for i in 0..crate::quadruped::FEET {
            if !mode.contact[i] {
                ju.columns_mut(3 * i, 3).fill(0.0);
            }
        }
    }
    let du = ju
        .svd(true, true)
        .solve(&(-a0), 1e-12)
        .map_err(|e| OcpError::Model(e.to_string()))?;
    let u = u_ref + du;
    debug_assert_eq!(u.len(), INPUT_DIM);
    Ok(u)
}
