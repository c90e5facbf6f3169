//! Joint-space OCP model for any [`MechanicalModel`] and the closed-loop
//! two-link-arm scenario used as the fully actuated testbed.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{ControllerError, ControllerVariant};
use crate::clf::{compose_at, lyapunov_value, AdaptiveEstimate, ClfTerms, ReferenceSample, ReferenceSignal, SlidingSurfaceConfig};
use crate::mechanics::{
    nominal_forward_dynamics, true_forward_dynamics, GeneralizedState, MechanicalModel, PlanarLink, PlantTruth, TwoLinkArm,
};
use crate::ocp::{
    lqr_terminal_cost, solve_sqp, ModeSchedule, MultipleShootingNlp, NodeContext, OcpDefinition, OcpError, OcpModel,
    RelaxedBarrierConfig, SqpSettings, TerminalCost, Trajectory,
};
use crate::parallel::Execution;
use crate::simlab::{SimError, Verdict};

/// Dynamics used inside the horizon.
#[derive(Clone, Debug, PartialEq)]
pub enum JointPrediction {
    Nominal,
    /// Nominal model with `-Y_u(q, v, v_r, v̇_r) π̂` added.
    Adaptive,
    /// Nominal model plus the true uncertain parameters.
    Perfect(DVector<f64>),
}

/// OCP over `x = (q, v)`, `u = τ`.
pub struct MechanicalOcpModel {
    pub system: Arc<dyn MechanicalModel>,
    pub reference: Arc<dyn ReferenceSignal>,
    pub sliding: SlidingSurfaceConfig,
    pub prediction: JointPrediction,
    pub pi_hat: DVector<f64>,
    /// Impose `h_clf ≥ 0` at every stage.
    pub clf: bool,
}

impl MechanicalOcpModel {
    fn state(&self, x: &DVector<f64>) -> GeneralizedState {
        GeneralizedState::from_stacked(x)
    }

    fn adaptive_load(&self, t: f64, state: &GeneralizedState) -> Result<Option<DVector<f64>>, OcpError> {
        if self.prediction != JointPrediction::Adaptive || self.pi_hat.iter().all(|&p| p == 0.0) {
            return Ok(None);
        }
        let s = compose_at(state, &self.reference.sample(t), &self.sliding);
        let y = self
            .system
            .regressor_reference(state, &s.vr, &s.vr_dot)
            .map_err(|e| OcpError::Model(e.to_string()))?;
        Ok(Some(y * &self.pi_hat))
    }

    /// `h_clf` at time `t`.
    pub fn clf_value(&self, t: f64, state: &GeneralizedState, tau: &DVector<f64>) -> Result<f64, OcpError> {
        let s = compose_at(state, &self.reference.sample(t), &self.sliding);
        let pi = match self.prediction {
            JointPrediction::Adaptive => self.pi_hat.clone(),
            _ => DVector::zeros(self.system.param_dim()),
        };
        let terms = ClfTerms::evaluate(self.system.as_ref(), state, &s, &pi, &self.sliding).map_err(|e| OcpError::Model(e.to_string()))?;
        let sel = self.system.nominal_terms(state).map_err(|e| OcpError::Model(e.to_string()))?.selection;
        Ok(terms.value(&(sel * tau)))
    }
}

impl OcpModel for MechanicalOcpModel {
    fn state_dim(&self) -> usize {
        2 * self.system.dof()
    }

    fn input_dim(&self) -> usize {
        self.system.input_dim()
    }

    fn flow(&self, ctx: &NodeContext, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        let state = self.state(x);
        let model = self.system.as_ref();
        let accel = match &self.prediction {
            JointPrediction::Perfect(pi) => {
                let n = model.dof();
                let plant = PlantTruth::new(self.system.clone(), pi.clone(), DVector::zeros(n));
                true_forward_dynamics(&plant, &state, u)
            }
            _ => {
                let load = self.adaptive_load(ctx.time, &state)?;
                nominal_forward_dynamics(model, &state, u, load.as_ref())
            }
        }
        .map_err(|e| OcpError::Model(e.to_string()))?;
        let n = model.dof();
        let mut dx = DVector::zeros(2 * n);
        dx.rows_mut(0, n).copy_from(&model.position_rate(&state));
        dx.rows_mut(n, n).copy_from(&accel);
        Ok(dx)
    }

    fn state_reference(&self, ctx: &NodeContext) -> DVector<f64> {
        let r = self.reference.sample(ctx.time);
        GeneralizedState::new(r.position, r.velocity).stacked()
    }

    /// Inverse dynamics of the prediction model along the reference.
    fn input_reference(&self, ctx: &NodeContext) -> DVector<f64> {
        let r = self.reference.sample(ctx.time);
        let state = GeneralizedState::new(r.position.clone(), r.velocity.clone());
        let model = self.system.as_ref();
        let Ok(terms) = model.nominal_terms(&state) else {
            return DVector::zeros(model.input_dim());
        };
        let mut force = terms.inverse_dynamics(&r.acceleration, &r.velocity);
        let pi = match &self.prediction {
            JointPrediction::Nominal => None,
            JointPrediction::Adaptive => Some(&self.pi_hat),
            JointPrediction::Perfect(pi) => Some(pi),
        };
        if let Some(pi) = pi {
            if let Ok(y) = model.regressor_reference(&state, &r.velocity, &r.acceleration) {
                force += y * pi;
            }
        }
        let svd = terms.selection.svd(true, true);
        svd.solve(&force, 1e-12).unwrap_or_else(|_| DVector::zeros(model.input_dim()))
    }

    fn inequalities(&self, ctx: &NodeContext, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if !self.clf {
            return DVector::zeros(0);
        }
        let h = self.clf_value(ctx.time, &self.state(x), u).unwrap_or(f64::NEG_INFINITY);
        DVector::from_element(1, h)
    }
}

/// `q_d(t) = center + amplitude ⊙ sin(ω t)` per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSinusoid {
    pub center: DVector<f64>,
    pub amplitude: DVector<f64>,
    /// Angular frequency [rad/s].
    pub frequency: f64,
}

impl ReferenceSignal for JointSinusoid {
    fn sample(&self, t: f64) -> ReferenceSample {
        let w = self.frequency;
        let (s, c) = (w * t).sin_cos();
        ReferenceSample {
            position: &self.center + &self.amplitude * s,
            orientation: None,
            velocity: &self.amplitude * (w * c),
            acceleration: &self.amplitude * (-w * w * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSettings {
    pub horizon: f64,
    pub nodes: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub barrier: RelaxedBarrierConfig,
    pub sqp: SqpSettings,
    pub lambda: f64,
    pub kd: f64,
    pub gamma: DMatrix<f64>,
    pub estimate_scale: DVector<f64>,
    pub bound_factor: f64,
    /// Move the applied torque onto `h_clf ≥ 0` when the solver leaves it
    /// slightly violated (the constraint is affine in `τ`).
    pub clf_projection: bool,
    pub control_period: f64,
    pub execution: Execution,
}

impl ArmSettings {
    pub fn defaults() -> Self {
        Self {
            horizon: 0.5,
            nodes: 11,
            q: DMatrix::from_diagonal(&DVector::from_column_slice(&[200.0, 200.0, 10.0, 10.0])),
            r: DMatrix::identity(2, 2) * 1e-3,
            barrier: RelaxedBarrierConfig { mu: 0.1, delta: 5.0 },
            sqp: SqpSettings {
                max_iterations: 3,
                ..SqpSettings::default()
            },
            lambda: 5.0,
            kd: 10.0,
            gamma: DMatrix::identity(PlanarLink::DIM, PlanarLink::DIM) * 5.0,
            estimate_scale: DVector::from_element(PlanarLink::DIM, 1.0),
            bound_factor: 10.0,
            clf_projection: true,
            control_period: 0.01,
            execution: Execution::Sequential,
        }
    }

    pub fn sliding_config(&self) -> Result<SlidingSurfaceConfig, ControllerError> {
        Ok(SlidingSurfaceConfig::new(
            DMatrix::identity(2, 2) * self.lambda,
            DMatrix::identity(2, 2) * self.kd,
        )?)
    }
}

/// Two-link arm carrying an unknown tip payload while tracking a joint sinusoid.
#[derive(Clone, Debug)]
pub struct ArmScenario {
    pub name: String,
    pub variant: ControllerVariant,
    pub settings: ArmSettings,
    pub arm: TwoLinkArm,
    /// Length of link 2, used for the tip-position metric [m].
    pub length2: f64,
    pub payload: PlanarLink,
    pub reference: JointSinusoid,
    pub initial: GeneralizedState,
    pub duration: f64,
    pub plant_substeps: usize,
    pub divergence_threshold: f64,
    pub transient: f64,
    /// Uniform initial joint-angle perturbation [rad].
    pub initial_perturbation: f64,
    pub seed: u64,
}

impl ArmScenario {
    /// Default arm, point payload of `payload_mass` at the tip.
    pub fn tip_payload(name: &str, variant: ControllerVariant, payload_mass: f64, duration: f64) -> Self {
        let reference = JointSinusoid {
            center: DVector::from_column_slice(&[-0.5, 0.8]),
            amplitude: DVector::from_column_slice(&[0.4, 0.4]),
            frequency: 2.0,
        };
        let start = reference.sample(0.0);
        Self {
            name: name.to_string(),
            variant,
            settings: ArmSettings::defaults(),
            arm: TwoLinkArm::default(),
            length2: 1.0,
            payload: PlanarLink::point_mass(payload_mass, Vector2::new(1.0, 0.0)),
            initial: GeneralizedState::new(start.position + DVector::from_column_slice(&[0.2, -0.2]), start.velocity),
            reference,
            duration,
            plant_substeps: 10,
            divergence_threshold: 1.0,
            transient: 0.2,
            initial_perturbation: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |reason: String| SimError::Invalid {
            name: self.name.clone(),
            reason,
        };
        if matches!(self.variant, ControllerVariant::MomentumObserverMpc) {
            return Err(invalid("the momentum observer is only available for the quadruped".into()));
        }
        if !(self.duration > self.settings.horizon) {
            return Err(invalid(format!(
                "duration {} s must exceed the horizon {} s",
                self.duration, self.settings.horizon
            )));
        }
        if self.plant_substeps == 0 {
            return Err(invalid("plant_substeps must be positive".into()));
        }
        if self.initial.q.len() != 2 || self.initial.v.len() != 2 {
            return Err(invalid("initial state must have two joints".into()));
        }
        Ok(())
    }

    pub fn tip(&self, q: &DVector<f64>) -> Vector2<f64> {
        let (l1, l2) = (self.arm.length1, self.length2);
        let a = q[0] + q[1];
        Vector2::new(l1 * q[0].cos() + l2 * a.cos(), l1 * q[0].sin() + l2 * a.sin())
    }
}

/// One control instant of an arm run.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmStepLog {
    pub t: f64,
    pub state: GeneralizedState,
    pub q_ref: DVector<f64>,
    pub tau: DVector<f64>,
    pub sigma: DVector<f64>,
    pub h_clf: f64,
    /// Lyapunov candidate with the true payload.
    pub lyapunov: f64,
    pub pi_hat: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub cost: f64,
    pub solve_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub name: String,
    pub variant: ControllerVariant,
    pub horizon: f64,
    pub log: Vec<ArmStepLog>,
    /// RMS tip-position error [m].
    pub tip_rmse: f64,
    /// RMS joint error norm [deg].
    pub joint_rmse_deg: f64,
    pub verdict: Verdict,
    pub failure_time: Option<f64>,
    pub failure_reason: Option<String>,
}

struct ArmController {
    variant: ControllerVariant,
    settings: ArmSettings,
    system: Arc<dyn MechanicalModel>,
    reference: Arc<dyn ReferenceSignal>,
    sliding: SlidingSurfaceConfig,
    truth: DVector<f64>,
    estimate: Option<AdaptiveEstimate>,
    terminal: Option<TerminalCost>,
    warm: Option<Trajectory>,
    started: bool,
}

impl ArmController {
    fn new(scenario: &ArmScenario) -> Result<Self, ControllerError> {
        let settings = scenario.settings.clone();
        let p = PlanarLink::DIM;
        let estimate = if scenario.variant.adapts() {
            let mut e = AdaptiveEstimate::new(DVector::zeros(p), settings.gamma.clone(), &settings.estimate_scale, settings.bound_factor)?;
            e.lower[0] = 0.0;
            Some(e)
        } else {
            None
        };
        let mut c = Self {
            variant: scenario.variant,
            sliding: settings.sliding_config()?,
            settings,
            system: Arc::new(scenario.arm.clone()),
            reference: Arc::new(scenario.reference.clone()),
            truth: scenario.payload.to_vector(),
            estimate,
            terminal: None,
            warm: None,
            started: false,
        };
        if scenario.variant.terminal_cost() {
            c.terminal = Some(c.terminal_cost()?);
        }
        Ok(c)
    }

    fn prediction(&self) -> JointPrediction {
        if self.variant.needs_truth() {
            JointPrediction::Perfect(self.truth.clone())
        } else if self.variant.adapts() {
            JointPrediction::Adaptive
        } else {
            JointPrediction::Nominal
        }
    }

    fn model(&self) -> MechanicalOcpModel {
        MechanicalOcpModel {
            system: self.system.clone(),
            reference: self.reference.clone(),
            sliding: self.sliding.clone(),
            prediction: self.prediction(),
            pi_hat: self.estimate.as_ref().map(|e| e.pi_hat.clone()).unwrap_or_else(|| DVector::zeros(PlanarLink::DIM)),
            clf: self.variant.clf_constraint(),
        }
    }

    /// LQR value of the nominal arm linearized at rest at the initial reference pose.
    fn terminal_cost(&self) -> Result<TerminalCost, ControllerError> {
        let mut model = self.model();
        model.prediction = JointPrediction::Nominal;
        let ctx = NodeContext { time: 0.0, mode: 0 };
        let q0 = self.reference.sample(0.0).position;
        let rest = GeneralizedState::new(q0.clone(), DVector::zeros(q0.len()));
        let u_eq = self
            .system
            .nominal_terms(&rest)
            .map_err(|e| OcpError::Model(e.to_string()))?
            .gravity;
        let dt = self.settings.horizon / (self.settings.nodes - 1) as f64;
        let flow = |x: &DVector<f64>, u: &DVector<f64>| model.flow(&ctx, x, u);
        let mut t = lqr_terminal_cost(flow, &self.settings.q, &self.settings.r, &rest.stacked(), &u_eq, dt)?;
        t.track_reference = true;
        Ok(t)
    }

    fn step(&mut self, t: f64, state: &GeneralizedState) -> Result<(DVector<f64>, crate::ocp::SolverResult), ControllerError> {
        let sample = self.reference.sample(t);
        let sliding = compose_at(state, &sample, &self.sliding);
        if let Some(est) = self.estimate.as_mut() {
            if self.started {
                let y = self
                    .system
                    .regressor_reference(state, &sliding.vr, &sliding.vr_dot)
                    .map_err(|e| OcpError::Model(e.to_string()))?;
                est.update(&sliding, &y, self.settings.control_period);
            }
        }
        self.started = true;
        let model = self.model();
        let def = OcpDefinition {
            horizon: self.settings.horizon,
            nodes: self.settings.nodes,
            q: self.settings.q.clone(),
            r: self.settings.r.clone(),
            terminal: self.terminal.clone(),
            barrier: self.settings.barrier,
            schedule: ModeSchedule::single(0),
            model: Arc::new(model),
        };
        let nlp = MultipleShootingNlp::transcribe(&def, &state.stacked(), t)?.with_execution(self.settings.execution);
        let result = solve_sqp(&nlp, self.warm.as_ref(), &self.settings.sqp)?;
        let mut tau = result.first_input().clone();
        if tau.iter().any(|x| !x.is_finite()) {
            return Err(ControllerError::NonFinite);
        }
        if self.variant.clf_constraint() && self.settings.clf_projection {
            let m = self.model();
            let h = m.clf_value(t, state, &tau)?;
            if h < 0.0 {
                let sel = self.system.nominal_terms(state).map_err(|e| OcpError::Model(e.to_string()))?.selection;
                let dir = sel.transpose() * &sliding.sigma;
                let n2 = dir.norm_squared();
                if n2 > 0.0 {
                    tau += dir * (-h / n2);
                }
            }
        }
        self.warm = Some(result.trajectory.clone());
        Ok((tau, result))
    }
}

fn plant_step(plant: &PlantTruth, state: &GeneralizedState, tau: &DVector<f64>, h: f64) -> Result<GeneralizedState, SimError> {
    let f = |x: &DVector<f64>| -> Result<DVector<f64>, SimError> {
        let s = GeneralizedState::from_stacked(x);
        let a = true_forward_dynamics(plant, &s, tau).map_err(|e| SimError::Invalid {
            name: "plant".into(),
            reason: e.to_string(),
        })?;
        let n = s.q.len();
        let mut dx = DVector::zeros(2 * n);
        dx.rows_mut(0, n).copy_from(&plant.model.position_rate(&s));
        dx.rows_mut(n, n).copy_from(&a);
        Ok(dx)
    };
    let x = state.stacked();
    let k1 = f(&x)?;
    let k2 = f(&(&x + &k1 * (0.5 * h)))?;
    let k3 = f(&(&x + &k2 * (0.5 * h)))?;
    let k4 = f(&(&x + &k3 * h))?;
    Ok(GeneralizedState::from_stacked(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))))
}

/// Run one arm scenario; controller failures become verdicts.
pub fn run_arm_scenario(scenario: &ArmScenario) -> Result<ArmResult, SimError> {
    scenario.validate()?;
    let mut state = scenario.initial.clone();
    if scenario.initial_perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let a = scenario.initial_perturbation;
        for k in 0..state.q.len() {
            state.q[k] += rng.random_range(-a..=a);
        }
    }
    let mut controller = ArmController::new(scenario)?;
    let system: Arc<dyn MechanicalModel> = Arc::new(scenario.arm.clone());
    let plant = PlantTruth::new(system.clone(), scenario.payload.to_vector(), DVector::zeros(2));
    let period = scenario.settings.control_period;
    let steps = (scenario.duration / period).round() as usize;
    let h = period / scenario.plant_substeps as f64;
    let gamma = scenario.settings.gamma.clone();
    let adapts = scenario.variant.adapts();
    let mut log = Vec::with_capacity(steps);
    let (mut verdict, mut failure_time, mut failure_reason) = (Verdict::Stable, None, None);

    for k in 0..steps {
        let t = k as f64 * period;
        let sample = scenario.reference.sample(t);
        let err = (&sample.position - &state.q).norm();
        if err > scenario.divergence_threshold || state.q.iter().chain(state.v.iter()).any(|x| !x.is_finite()) {
            verdict = Verdict::Diverged;
            failure_time = Some(t);
            failure_reason = Some(format!("joint error {err:.3} rad"));
            break;
        }
        let (tau, result) = match controller.step(t, &state) {
            Ok(o) => o,
            Err(e) => {
                verdict = Verdict::SolverFailed;
                failure_time = Some(t);
                failure_reason = Some(e.to_string());
                break;
            }
        };
        let model = controller.model();
        let sliding = compose_at(&state, &sample, &controller.sliding);
        let h_clf = model.clf_value(t, &state, &tau).unwrap_or(f64::NAN);
        let pi_hat = model.pi_hat.clone();
        let mass = system
            .nominal_terms(&state)
            .and_then(|n| Ok(n.combined(&system.uncertain_terms(&state, &plant.payload)?)))
            .map(|c| c.mass)
            .unwrap_or_else(|_| DMatrix::zeros(2, 2));
        let lyapunov = if adapts {
            lyapunov_value(&sliding, &mass, &(&plant.payload - &pi_hat), &gamma)
        } else {
            lyapunov_value(&sliding, &mass, &DVector::zeros(0), &gamma)
        };
        log.push(ArmStepLog {
            t,
            state: state.clone(),
            q_ref: sample.position.clone(),
            tau: tau.clone(),
            sigma: sliding.sigma.clone(),
            h_clf,
            lyapunov,
            pi_hat,
            iterations: result.iterations,
            converged: result.converged,
            kkt_residual: result.kkt_residual,
            cost: result.cost,
            solve_time: result.solve_time,
        });
        let mut failed = None;
        for j in 0..scenario.plant_substeps {
            match plant_step(&plant, &state, &tau, h) {
                Ok(next) => state = next,
                Err(e) => {
                    failed = Some((t + j as f64 * h, e.to_string()));
                    break;
                }
            }
        }
        if let Some((ts, reason)) = failed {
            verdict = Verdict::Diverged;
            failure_time = Some(ts);
            failure_reason = Some(reason);
            break;
        }
    }

    let kept: Vec<_> = log.iter().filter(|l| l.t >= scenario.transient).collect();
    let (tip_rmse, joint_rmse_deg) = if kept.is_empty() {
        (0.0, 0.0)
    } else {
        let n = kept.len() as f64;
        let tip = kept
            .iter()
            .map(|l| (scenario.tip(&l.state.q) - scenario.tip(&l.q_ref)).norm_squared())
            .sum::<f64>()
            / n;
        let joint = kept.iter().map(|l| (&l.q_ref - &l.state.q).norm_squared()).sum::<f64>() / n;
        (tip.sqrt(), joint.sqrt().to_degrees())
    };
    Ok(ArmResult {
        name: scenario.name.clone(),
        variant: scenario.variant,
        horizon: scenario.settings.horizon,
        log,
        tip_rmse,
        joint_rmse_deg,
        verdict,
        failure_time,
        failure_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_derivatives_are_consistent() {
        let r = JointSinusoid {
            center: DVector::from_column_slice(&[0.1, -0.2]),
            amplitude: DVector::from_column_slice(&[0.3, 0.5]),
            frequency: 1.7,
        };
        let (t, h) = (0.37, 1e-6);
        let fd = (r.sample(t + h).position - r.sample(t - h).position) / (2.0 * h);
        assert!((fd - r.sample(t).velocity).amax() < 1e-8);
        let fd = (r.sample(t + h).velocity - r.sample(t - h).velocity) / (2.0 * h);
        assert!((fd - r.sample(t).acceleration).amax() < 1e-7);
    }

    #[test]
    fn nominal_flow_rests_under_gravity_torque() {
        let arm = TwoLinkArm::default();
        let q = DVector::from_column_slice(&[0.3, 0.4]);
        let rest = GeneralizedState::new(q.clone(), DVector::zeros(2));
        let g = arm.nominal_terms(&rest).unwrap().gravity;
        let model = MechanicalOcpModel {
            system: Arc::new(arm),
            reference: Arc::new(ReferenceSample::joint_hold(q)),
            sliding: ArmSettings::defaults().sliding_config().unwrap(),
            prediction: JointPrediction::Nominal,
            pi_hat: DVector::zeros(4),
            clf: false,
        };
        let dx = model.flow(&NodeContext { time: 0.0, mode: 0 }, &rest.stacked(), &g).unwrap();
        assert!(dx.amax() < 1e-12);
        assert!((model.input_reference(&NodeContext { time: 0.0, mode: 0 }) - g).amax() < 1e-12);
    }
}
