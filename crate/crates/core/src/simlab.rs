//! Closed-loop simulation: true plant at a fine RK4 step, controller at a fixed
//! rate, logging and tracking metrics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SVector, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::{make_controller, ControllerError, ControllerSettings, ControllerVariant, Task};
use crate::clf::{ReferenceSample, ReferenceSignal};
use crate::mechanics::rotation::{quaternion_from_euler, rotation_angle_between};
use crate::mechanics::{InertialParameters, MechanicsError, RigidBodyTerms};
use crate::ocp::certainty_equivalence_split;
use crate::parallel::{map_slice, with_threads, Execution};
use crate::quadruped::{
    adaptive_generalized_force, adaptive_regressor, contact_wrench, selection_matrix, true_flow, AdaptiveWrenchParams,
    ContactMode, ContactSchedule, NominalBody, StaticWalk, QuadrupedInput, QuadrupedOcpModel, QuadrupedState, ADAPTIVE_DIM, FEET,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario '{name}': {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Piecewise-constant offsets of CoM height, roll and pitch around a nominal pose.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReference {
    pub start: f64,
    pub base_position: Vector3<f64>,
    pub dwell: f64,
    /// `(Δz [m], roll [rad], pitch [rad])` per segment.
    pub segments: Vec<Vector3<f64>>,
}

impl StepReference {
    /// Hold, `+z`, `-z`, `+pitch`, `-pitch`, `+roll`, `-roll`, hold.
    pub fn protocol(base_position: Vector3<f64>, dz: f64, angle: f64, dwell: f64) -> Self {
        let segments = vec![
            Vector3::zeros(),
            Vector3::new(dz, 0.0, 0.0),
            Vector3::new(-dz, 0.0, 0.0),
            Vector3::new(0.0, 0.0, angle),
            Vector3::new(0.0, 0.0, -angle),
            Vector3::new(0.0, angle, 0.0),
            Vector3::new(0.0, -angle, 0.0),
            Vector3::zeros(),
        ];
        Self {
            start: 0.0,
            base_position,
            dwell,
            segments,
        }
    }

    pub fn hold(base_position: Vector3<f64>) -> Self {
        Self {
            start: 0.0,
            base_position,
            dwell: 1.0,
            segments: vec![Vector3::zeros()],
        }
    }

    pub fn duration(&self) -> f64 {
        self.dwell * self.segments.len() as f64
    }

    fn segment(&self, t: f64) -> Vector3<f64> {
        let k = ((t - self.start) / self.dwell).floor().max(0.0) as usize;
        self.segments[k.min(self.segments.len() - 1)]
    }
}

impl ReferenceSignal for StepReference {
    fn sample(&self, t: f64) -> ReferenceSample {
        let s = self.segment(t);
        let p = self.base_position + Vector3::new(0.0, 0.0, s.x);
        ReferenceSample::floating_hold(p, quaternion_from_euler(&Vector3::new(s.y, s.z, 0.0)))
    }
}

#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub variant: ControllerVariant,
    pub settings: ControllerSettings,
    pub body: NominalBody,
    /// Rigid payload attached to the base, unknown to the controllers.
    pub payload: InertialParameters,
    /// Constant external force at the CoM, world frame [N].
    pub external_force: Vector3<f64>,
    pub schedule: Arc<ContactSchedule>,
    pub reference: Arc<dyn ReferenceSignal>,
    pub initial: QuadrupedState,
    pub duration: f64,
    pub plant_substeps: usize,
    pub divergence_threshold: f64,
    pub transient: f64,
    /// Project applied forces onto the friction cones of the stance feet.
    pub clamp_to_cone: bool,
    /// Uniform initial perturbation amplitude of position [m] and attitude [rad].
    pub initial_perturbation: f64,
    pub seed: u64,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("variant", &self.variant)
            .field("duration", &self.duration)
            .field("horizon", &self.settings.horizon)
            .finish()
    }
}

impl Scenario {
    pub fn truth(&self) -> AdaptiveWrenchParams {
        AdaptiveWrenchParams::from_truth(self.payload, self.external_force)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |reason: String| SimError::Invalid {
            name: self.name.clone(),
            reason,
        };
        if !(self.duration > self.settings.horizon) {
            return Err(invalid(format!(
                "duration {} s must exceed the horizon {} s",
                self.duration, self.settings.horizon
            )));
        }
        if self.schedule.end() < self.duration + self.settings.horizon - 1e-9 {
            return Err(invalid("contact schedule ends before the last horizon".into()));
        }
        let min_stance = if self.variant.adapts() { 3 } else { 1 };
        self.schedule.validate(min_stance).map_err(|e| invalid(e.to_string()))?;
        self.payload.validate().map_err(|e| invalid(e.to_string()))?;
        if self.plant_substeps == 0 {
            return Err(invalid("plant_substeps must be positive".into()));
        }
        Ok(())
    }
}

/// Foot offsets from the CoM of a symmetric stance, base frame.
pub fn symmetric_feet(half_length: f64, half_width: f64, height: f64) -> [Vector3<f64>; FEET] {
    [
        Vector3::new(half_length, half_width, -height),
        Vector3::new(half_length, -half_width, -height),
        Vector3::new(-half_length, half_width, -height),
        Vector3::new(-half_length, -half_width, -height),
    ]
}

/// Standing on flat ground with feet under the nominal stance while tracking `reference`.
pub fn standing_scenario(
    name: &str,
    variant: ControllerVariant,
    settings: ControllerSettings,
    body: NominalBody,
    payload: InertialParameters,
    feet: [Vector3<f64>; FEET],
    reference: StepReference,
    duration: f64,
) -> Scenario {
    let base = reference.base_position;
    let world_feet = feet.map(|f| base + f);
    let schedule = ContactSchedule::standing(world_feet, Matrix3::identity(), 0.0, duration + settings.horizon + 1.0);
    Scenario {
        name: name.to_string(),
        variant,
        settings,
        body,
        payload,
        external_force: Vector3::zeros(),
        schedule: Arc::new(schedule),
        reference: Arc::new(reference),
        initial: QuadrupedState::at_rest(base, Vector3::zeros()),
        duration,
        plant_substeps: 10,
        divergence_threshold: 1.0,
        transient: 0.2,
        clamp_to_cone: true,
        initial_perturbation: 0.0,
        seed: 0,
    }
}

/// Static walk on a slope against a constant force opposing the motion.
pub fn slope_scenario(
    name: &str,
    variant: ControllerVariant,
    settings: ControllerSettings,
    body: NominalBody,
    walk: StaticWalk,
    force: f64,
) -> Scenario {
    let mut w = walk.clone();
    w.duration = walk.duration + settings.horizon + 1.0;
    let schedule = w.schedule();
    Scenario {
        name: name.to_string(),
        variant,
        settings,
        body,
        payload: InertialParameters::zero(),
        external_force: -walk.direction() * force,
        schedule: Arc::new(schedule),
        initial: walk.initial_state(),
        reference: Arc::new(walk.clone()),
        duration: walk.duration,
        plant_substeps: 10,
        divergence_threshold: 1.0,
        transient: 0.2,
        clamp_to_cone: true,
        initial_perturbation: 0.0,
        seed: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Diverged,
    SolverFailed,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Diverged => "diverged",
            Verdict::SolverFailed => "solver-failed",
        }
    }

    pub fn is_stable(self) -> bool {
        self == Verdict::Stable
    }
}

/// Everything logged at one control instant.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub t: f64,
    pub state: QuadrupedState,
    pub p_ref: Vector3<f64>,
    pub q_ref: UnitQuaternion<f64>,
    /// Commanded foot forces (base frame).
    pub input: QuadrupedInput,
    pub sigma: Vector6<f64>,
    /// `h_clf` at the applied input with the controller's estimate.
    pub h_clf: f64,
    /// Lyapunov candidate with the true parameters.
    pub lyapunov: f64,
    pub pi_hat: SVector<f64, ADAPTIVE_DIM>,
    /// `(f_u, t_u)` of the estimate, force in the base frame.
    pub adaptive_wrench: Vector6<f64>,
    /// `‖S w - Y_n π_n‖`.
    pub residual: f64,
    /// `‖Y_u π̂ - Y_u π‖`.
    pub estimate_gap: f64,
    /// Whether the adaptive compensation lies in the range of `S`.
    pub matched: bool,
    pub disturbance: Vector6<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub cost: f64,
    pub solve_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub name: String,
    pub variant: ControllerVariant,
    pub horizon: f64,
    pub log: Vec<StepLog>,
    pub linear_rmse: f64,
    pub angular_rmse_deg: f64,
    pub verdict: Verdict,
    pub failure_time: Option<f64>,
    pub failure_reason: Option<String>,
}

/// Position and attitude sample for the tracking metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub p_ref: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub q_ref: UnitQuaternion<f64>,
}

/// RMS of `‖p - p_ref‖` [m] and of the attitude-error angle [deg] over the
/// samples with `t ≥ transient`.
pub fn compute_rmse(samples: &[TrackingSample], transient: f64) -> (f64, f64) {
    let kept: Vec<_> = samples.iter().filter(|s| s.t >= transient).collect();
    if kept.is_empty() {
        return (0.0, 0.0);
    }
    let n = kept.len() as f64;
    let lin = kept.iter().map(|s| (s.p - s.p_ref).norm_squared()).sum::<f64>() / n;
    let ang = kept
        .iter()
        .map(|s| rotation_angle_between(&s.q, &s.q_ref).powi(2))
        .sum::<f64>()
        / n;
    (lin.sqrt(), ang.sqrt().to_degrees())
}

/// Project each stance force onto its friction cone; swing feet get zero.
pub fn clamp_to_cone(input: &QuadrupedInput, mode: &ContactMode, rotation: &Matrix3<f64>, mu: f64) -> QuadrupedInput {
    let mut out = QuadrupedInput::zero();
    for i in 0..FEET {
        if !mode.contact[i] {
            continue;
        }
        let to_contact = mode.terrain * rotation;
        let mut f = to_contact * input.forces[i];
        f.z = f.z.max(0.0);
        let tangential = (f.x * f.x + f.y * f.y).sqrt();
        if tangential > mu * f.z {
            let scale = if tangential > 0.0 { mu * f.z / tangential } else { 0.0 };
            f.x *= scale;
            f.y *= scale;
        }
        out.forces[i] = to_contact.transpose() * f;
    }
    out
}

fn plant_step(
    state: &QuadrupedState,
    input: &QuadrupedInput,
    mode: &ContactMode,
    body: &NominalBody,
    truth: &AdaptiveWrenchParams,
    h: f64,
) -> Result<QuadrupedState, MechanicsError> {
    let f = |s: &QuadrupedState| -> Result<SVector<f64, 12>, MechanicsError> {
        true_flow(s, &contact_wrench(s, input, mode), body, truth)
    };
    let x = state.to_vector();
    let at = |v: SVector<f64, 12>| QuadrupedState::from_slice(v.as_slice());
    let k1 = f(state)?;
    let k2 = f(&at(x + k1 * (0.5 * h)))?;
    let k3 = f(&at(x + k2 * (0.5 * h)))?;
    let k4 = f(&at(x + k3 * h))?;
    let next = at(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
    next.check_chart()?;
    Ok(next)
}

struct Diagnostics {
    h_clf: f64,
    lyapunov: f64,
    adaptive_wrench: Vector6<f64>,
    residual: f64,
    estimate_gap: f64,
    matched: bool,
}

fn diagnostics(
    scenario: &Scenario,
    model: &QuadrupedOcpModel,
    t: f64,
    state: &QuadrupedState,
    input: &QuadrupedInput,
    out: &crate::baselines::ControlOutput,
    gamma: Option<(&DMatrix<f64>, &[bool])>,
) -> Diagnostics {
    let mode_index = scenario.schedule.mode_index(t);
    let mode = &scenario.schedule.modes[mode_index];
    let sl = &out.sliding;
    let truth = scenario.truth().to_vector();
    let yu_hat = adaptive_generalized_force(state, &sl.vr, &sl.vr_dot, &out.pi_hat);
    let yu_true = adaptive_generalized_force(state, &sl.vr, &sl.vr_dot, &truth);
    let yn = scenario.body.inverse(state, &sl.vr, &sl.vr_dot);
    let wrench = contact_wrench(state, input, mode);
    let h_clf = model.clf_value(&scenario.settings.clf, t, mode_index, state, input);

    let params = scenario.body.params().plus(&scenario.payload);
    let m_true = RigidBodyTerms::new(&params, &state.rotation(), &state.omega).mass;
    let mut lyapunov = 0.5 * sl.sigma.dot(&(m_true * sl.sigma));
    if let Some((gamma, frozen)) = gamma {
        let idx: Vec<usize> = (0..ADAPTIVE_DIM).filter(|&i| !frozen[i]).collect();
        let g = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gamma[(idx[a], idx[b])]);
        let tilde = DVector::from_iterator(idx.len(), idx.iter().map(|&i| truth[i] - out.pi_hat[i]));
        if let Some(ch) = g.cholesky() {
            lyapunov += 0.5 * tilde.dot(&ch.solve(&tilde));
        }
    }

    let y = adaptive_regressor(state, &sl.vr, &sl.vr_dot);
    let yd = DMatrix::from_column_slice(6, ADAPTIVE_DIM, y.as_slice());
    let s = selection_matrix(state, mode);
    let pi_hat = DVector::from_column_slice(out.pi_hat.as_slice());
    let matched = certainty_equivalence_split(&input.to_dvector(), &yd, &pi_hat, &s).is_ok();

    let f = state.rotation().transpose() * yu_hat.fixed_rows::<3>(0);
    Diagnostics {
        h_clf,
        lyapunov,
        adaptive_wrench: Vector6::new(f.x, f.y, f.z, yu_hat[3], yu_hat[4], yu_hat[5]),
        residual: (wrench - yu_hat - yn).norm(),
        estimate_gap: (yu_hat - yu_true).norm(),
        matched,
    }
}

/// Run one closed-loop scenario. Controller failures end the run with a
/// verdict; only invalid scenarios are errors.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult, SimError> {
    scenario.validate()?;
    let truth = scenario.truth();
    let mut state = scenario.initial;
    if scenario.initial_perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let a = scenario.initial_perturbation;
        for k in 0..3 {
            state.p[k] += rng.random_range(-a..=a);
            state.theta[k] += rng.random_range(-a..=a);
        }
    }
    let task = Task {
        body: scenario.body,
        schedule: scenario.schedule.clone(),
        reference: scenario.reference.clone(),
    };
    let mut controller = make_controller(
        scenario.variant,
        scenario.settings.clone(),
        task,
        scenario.variant.needs_truth().then_some(truth),
        &state,
    )?;
    let period = scenario.settings.control_period;
    let steps = (scenario.duration / period).round() as usize;
    let h = period / scenario.plant_substeps as f64;
    let mut log = Vec::with_capacity(steps);
    let mut verdict = Verdict::Stable;
    let mut failure_time = None;
    let mut failure_reason = None;

    for k in 0..steps {
        let t = k as f64 * period;
        let sample = scenario.reference.sample(t);
        let p_ref = Vector3::new(sample.position[0], sample.position[1], sample.position[2]);
        let q_ref = sample.orientation.unwrap_or_else(UnitQuaternion::identity);
        if (state.p - p_ref).norm() > scenario.divergence_threshold || !state.is_finite() {
            verdict = Verdict::Diverged;
            failure_time = Some(t);
            failure_reason = Some(format!("position error {:.3} m", (state.p - p_ref).norm()));
            break;
        }
        let out = match controller.step(t, &state) {
            Ok(o) => o,
            Err(e) => {
                verdict = Verdict::SolverFailed;
                failure_time = Some(t);
                failure_reason = Some(e.to_string());
                break;
            }
        };
        let model = controller.model();
        let gamma = controller.estimate().map(|e| (&e.gamma, e.frozen.as_slice()));
        let d = diagnostics(scenario, &model, t, &state, &out.input, &out, gamma);
        log.push(StepLog {
            t,
            state,
            p_ref,
            q_ref,
            input: out.input,
            sigma: out.sliding.sigma,
            h_clf: d.h_clf,
            lyapunov: d.lyapunov,
            pi_hat: out.pi_hat,
            adaptive_wrench: d.adaptive_wrench,
            residual: d.residual,
            estimate_gap: d.estimate_gap,
            matched: d.matched,
            disturbance: out.disturbance,
            iterations: out.iterations,
            converged: out.converged,
            kkt_residual: out.kkt_residual,
            max_violation: out.max_violation,
            cost: out.cost,
            solve_time: out.solve_time,
        });

        let mut failed = None;
        for j in 0..scenario.plant_substeps {
            let ts = t + j as f64 * h;
            let mode = scenario.schedule.mode_at(ts);
            let applied = if scenario.clamp_to_cone {
                clamp_to_cone(&out.input, mode, &state.rotation(), scenario.settings.friction)
            } else {
                let mut u = out.input;
                for i in 0..FEET {
                    if !mode.contact[i] {
                        u.forces[i] = Vector3::zeros();
                    }
                }
                u
            };
            match plant_step(&state, &applied, mode, &scenario.body, &truth, h) {
                Ok(next) => state = next,
                Err(e) => {
                    failed = Some((ts, e.to_string()));
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

    let samples: Vec<TrackingSample> = log
        .iter()
        .map(|l| TrackingSample {
            t: l.t,
            p: l.state.p,
            p_ref: l.p_ref,
            q: quaternion_from_euler(&l.state.theta),
            q_ref: l.q_ref,
        })
        .collect();
    let (linear_rmse, angular_rmse_deg) = compute_rmse(&samples, scenario.transient);
    Ok(ScenarioResult {
        name: scenario.name.clone(),
        variant: scenario.variant,
        horizon: scenario.settings.horizon,
        log,
        linear_rmse,
        angular_rmse_deg,
        verdict,
        failure_time,
        failure_reason,
    })
}

/// Finite-difference and predicted `V̇` at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovRateSample {
    pub t: f64,
    pub finite_difference: f64,
    /// `σᵀ[-S τ + Y_n π_n + Y_u π̂]`
    pub predicted: f64,
}

/// Re-integrate the first plant substep after every logged control instant
/// with the update law in continuous time, and compare a central difference
/// of `V` (true parameters) at the substep midpoint with
/// `σᵀ[-S τ + Y_n π_n + Y_u π̂]`. Only meaningful for adaptive runs whose
/// estimate stayed inside its box.
pub fn lyapunov_rate_check(scenario: &Scenario, result: &ScenarioResult, fine_steps: usize) -> Vec<LyapunovRateSample> {
    let truth = scenario.truth();
    let truth_v = truth.to_vector();
    let settings = &scenario.settings;
    let frozen: Vec<bool> = (0..ADAPTIVE_DIM).map(|i| settings.freeze_torque && i >= 13).collect();
    let idx: Vec<usize> = (0..ADAPTIVE_DIM).filter(|&i| !frozen[i]).collect();
    let gamma = &settings.gamma;
    let g_free = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gamma[(idx[a], idx[b])]);
    let Some(g_chol) = g_free.cholesky() else {
        return Vec::new();
    };
    let h = settings.control_period / scenario.plant_substeps as f64;
    let fine_steps = fine_steps.max(2) & !1;
    let d = h / fine_steps as f64;
    let params = scenario.body.params().plus(&scenario.payload);

    let sliding_at = |t: f64, s: &QuadrupedState| {
        let sample = scenario.reference.sample(t);
        let qd = sample.orientation.unwrap_or_else(UnitQuaternion::identity);
        crate::clf::floating_sliding(
            &s.q(),
            &s.v(),
            &sample,
            &qd,
            &settings.clf.lambda_linear,
            &settings.clf.lambda_rotational,
        )
    };
    let lyapunov = |t: f64, s: &QuadrupedState, pi: &SVector<f64, ADAPTIVE_DIM>| {
        let sl = sliding_at(t, s);
        let m = RigidBodyTerms::new(&params, &s.rotation(), &s.omega).mass;
        let tilde = DVector::from_iterator(idx.len(), idx.iter().map(|&i| truth_v[i] - pi[i]));
        0.5 * sl.sigma.dot(&(m * sl.sigma)) + 0.5 * tilde.dot(&g_chol.solve(&tilde))
    };

    let mut out = Vec::new();
    for l in &result.log {
        let t0 = l.t;
        let mode = scenario.schedule.mode_at(t0);
        let applied = if scenario.clamp_to_cone {
            clamp_to_cone(&l.input, mode, &l.state.rotation(), settings.friction)
        } else {
            l.input
        };
        let rate = |t: f64, s: &QuadrupedState| {
            let dx = true_flow(s, &contact_wrench(s, &applied, mode), &scenario.body, &truth).ok()?;
            let sl = sliding_at(t, s);
            let mut dpi = gamma * (adaptive_regressor(s, &sl.vr, &sl.vr_dot).transpose() * sl.sigma);
            for (i, f) in frozen.iter().enumerate() {
                if *f {
                    dpi[i] = 0.0;
                }
            }
            Some((dx, SVector::<f64, ADAPTIVE_DIM>::from_column_slice(dpi.as_slice())))
        };
        let mut x = l.state.to_vector();
        let mut pi = l.pi_hat;
        let mut samples = Vec::with_capacity(3);
        let mut ok = true;
        for j in 0..=fine_steps / 2 + 1 {
            let t = t0 + j as f64 * d;
            if j + 1 >= fine_steps / 2 {
                samples.push((t, QuadrupedState::from_slice(x.as_slice()), pi));
            }
            let at = |x: SVector<f64, 12>| QuadrupedState::from_slice(x.as_slice());
            let step = (|| {
                let (k1, p1) = rate(t, &at(x))?;
                let (k2, p2) = rate(t + 0.5 * d, &at(x + k1 * (0.5 * d)))?;
                let (k3, p3) = rate(t + 0.5 * d, &at(x + k2 * (0.5 * d)))?;
                let (k4, p4) = rate(t + d, &at(x + k3 * d))?;
                Some((
                    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (d / 6.0),
                    pi + (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (d / 6.0),
                ))
            })();
            match step {
                Some((nx, npi)) => {
                    x = nx;
                    pi = npi;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || samples.len() < 3 {
            continue;
        }
        let (tm, sm, pim) = samples[1];
        let fd = (lyapunov(samples[2].0, &samples[2].1, &samples[2].2) - lyapunov(samples[0].0, &samples[0].1, &samples[0].2)) / (2.0 * d);
        let sl = sliding_at(tm, &sm);
        let yn = scenario.body.inverse(&sm, &sl.vr, &sl.vr_dot);
        let yu = adaptive_generalized_force(&sm, &sl.vr, &sl.vr_dot, &pim);
        let predicted = sl.sigma.dot(&(-contact_wrench(&sm, &applied, mode) + yn + yu));
        out.push(LyapunovRateSample {
            t: tm,
            finite_difference: fd,
            predicted,
        });
    }
    out
}

/// Run scenarios on up to `jobs` threads; results keep the input order.
pub fn run_scenarios(scenarios: &[Scenario], jobs: usize) -> Vec<Result<ScenarioResult, SimError>> {
    let execution = if jobs > 1 { Execution::best_available() } else { Execution::Sequential };
    with_threads(jobs.max(1), || map_slice(execution, scenarios, run_scenario))
}

/// One row of a force sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub variant: ControllerVariant,
    pub force: f64,
    pub verdict: Verdict,
    pub linear_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub entries: Vec<SweepEntry>,
}

impl SweepTable {
    /// Largest force below which every tested force was survived.
    pub fn max_tolerated(&self, variant: ControllerVariant) -> Option<f64> {
        let mut rows: Vec<_> = self.entries.iter().filter(|e| e.variant == variant).collect();
        rows.sort_by(|a, b| a.force.total_cmp(&b.force));
        let mut best = None;
        for r in rows {
            if !r.verdict.is_stable() {
                break;
            }
            best = Some(r.force);
        }
        best
    }
}

/// Run `base` for every force of `forces` (applied along `direction`) and
/// every variant of `variants`.
pub fn slope_force_sweep(
    base: &Scenario,
    direction: Vector3<f64>,
    forces: &[f64],
    variants: &[ControllerVariant],
    jobs: usize,
) -> Result<SweepTable, SimError> {
    if forces.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SimError::Invalid {
            name: base.name.clone(),
            reason: "force grid must increase".into(),
        });
    }
    let dir = direction.normalize();
    let mut runs = Vec::new();
    for &v in variants {
        for &f in forces {
            let mut s = base.clone();
            s.variant = v;
            s.external_force = dir * f;
            s.name = format!("{}_{}_{f}N", base.name, v.name());
            runs.push(s);
        }
    }
    let results = run_scenarios(&runs, jobs);
    let mut entries = Vec::with_capacity(runs.len());
    for (s, r) in runs.iter().zip(results) {
        let r = r?;
        entries.push(SweepEntry {
            variant: s.variant,
            force: s.external_force.norm(),
            verdict: r.verdict,
            linear_rmse: r.linear_rmse,
        });
    }
    Ok(SweepTable { entries })
}
