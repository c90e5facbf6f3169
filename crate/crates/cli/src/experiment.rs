//! Turning a configuration into runs, executing them and writing results.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use aclf::baselines::{ControllerSettings, ControllerVariant};
use aclf::manipulator::{run_arm_scenario, ArmResult, ArmScenario, ArmSettings, JointSinusoid};
use aclf::mechanics::rotation::{quaternion_from_euler, rotation_angle_between};
use aclf::mechanics::{GeneralizedState, InertialParameters};
use aclf::ocp::{RelaxedBarrierConfig, SqpSettings};
use aclf::parallel::{map_slice, with_threads, Execution};
use aclf::quadruped::{NominalBody, StaticWalk, FOOT_NAMES};
use aclf::simlab::{
    run_scenario, slope_scenario, standing_scenario, symmetric_feet, Scenario, ScenarioResult, SimError, StepReference, Verdict,
};
use aclf::clf::ReferenceSignal;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::config::{gamma_of, ArmSection, ConfigError, ExperimentConfig, QuadrupedSection, ScenarioKind, ScenarioSection};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// One simulation to execute.
#[derive(Clone, Debug)]
pub enum RunKind {
    Quadruped(Box<Scenario>),
    Arm(Box<ArmScenario>),
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub name: String,
    /// Name of the configuration scenario this run came from.
    pub scenario: String,
    pub kind: ScenarioKind,
    pub variant: ControllerVariant,
    pub horizon: f64,
    /// External force magnitude of a slope run [N].
    pub force: f64,
    pub run: RunKind,
}

#[derive(Clone, Debug)]
pub enum RunOutcome {
    Quadruped(ScenarioResult),
    Arm(ArmResult),
}

impl RunOutcome {
    pub fn verdict(&self) -> Verdict {
        match self {
            Self::Quadruped(r) => r.verdict,
            Self::Arm(r) => r.verdict,
        }
    }

    /// CoM (or tip) position RMSE [m] and attitude (or joint) RMSE [deg].
    pub fn rmse(&self) -> (f64, f64) {
        match self {
            Self::Quadruped(r) => (r.linear_rmse, r.angular_rmse_deg),
            Self::Arm(r) => (r.tip_rmse, r.joint_rmse_deg),
        }
    }

    pub fn failure(&self) -> (Option<f64>, Option<&str>) {
        match self {
            Self::Quadruped(r) => (r.failure_time, r.failure_reason.as_deref()),
            Self::Arm(r) => (r.failure_time, r.failure_reason.as_deref()),
        }
    }
}

pub fn quadruped_settings(q: &QuadrupedSection, horizon: Option<f64>) -> ControllerSettings {
    let mut s = ControllerSettings::quadruped_defaults();
    s.horizon = horizon.unwrap_or(q.horizon_s);
    s.nodes = q.nodes;
    s.q = DMatrix::from_diagonal(&DVector::from_column_slice(&q.state_weights));
    s.r = DMatrix::identity(s.r.nrows(), s.r.ncols()) * q.input_weight;
    s.barrier = RelaxedBarrierConfig {
        mu: q.barrier_mu,
        delta: q.barrier_delta,
    };
    s.sqp = SqpSettings {
        max_iterations: q.sqp_iterations,
        tolerance: q.sqp_tolerance,
        ..SqpSettings::default()
    };
    s.friction = q.friction_coefficient;
    s.cone_smoothing = q.cone_smoothing_n;
    s.clf.lambda_linear = Matrix3::identity() * q.lambda_linear_per_s;
    s.clf.lambda_rotational = Matrix3::identity() * q.lambda_rotational_per_s;
    s.clf.kd = Matrix6::from_diagonal(&Vector6::new(
        q.kd_linear,
        q.kd_linear,
        q.kd_linear,
        q.kd_rotational,
        q.kd_rotational,
        q.kd_rotational,
    ));
    s.gamma = gamma_of(&q.gamma_diag, &q.gamma_matrix);
    s.estimate_scale = DVector::from_column_slice(&q.estimate_scale);
    s.bound_factor = q.bound_factor;
    s.freeze_torque = q.freeze_torque;
    s.nonnegative_mass = q.nonnegative_mass;
    s.observer_gain = Matrix6::identity() * q.observer_gain_per_s;
    s.control_period = q.control_period_s;
    s.execution = if q.parallel_transcription {
        Execution::best_available()
    } else {
        Execution::Sequential
    };
    s
}

pub fn arm_settings(a: &ArmSection, horizon: Option<f64>) -> ArmSettings {
    let mut s = ArmSettings::defaults();
    s.horizon = horizon.unwrap_or(a.horizon_s);
    s.nodes = a.nodes;
    s.q = DMatrix::from_diagonal(&DVector::from_column_slice(&a.state_weights));
    s.r = DMatrix::identity(2, 2) * a.input_weight;
    s.barrier = RelaxedBarrierConfig {
        mu: a.barrier_mu,
        delta: a.barrier_delta,
    };
    s.sqp.max_iterations = a.sqp_iterations;
    s.lambda = a.lambda_per_s;
    s.kd = a.kd;
    s.gamma = gamma_of(&a.gamma_diag, &a.gamma_matrix);
    s.estimate_scale = DVector::from_column_slice(&a.estimate_scale);
    s.bound_factor = a.bound_factor;
    s.clf_projection = a.clf_projection;
    s.control_period = a.control_period_s;
    s
}

fn v3(v: &Option<Vec<f64>>) -> Vector3<f64> {
    let v = v.as_deref().unwrap_or(&[0.0, 0.0, 0.0]);
    Vector3::new(v[0], v[1], v[2])
}

fn dv(v: &Option<Vec<f64>>) -> DVector<f64> {
    DVector::from_column_slice(v.as_deref().unwrap_or(&[]))
}

fn quadruped_runs(cfg: &ExperimentConfig, s: &ScenarioSection, variant: ControllerVariant) -> Result<Vec<RunSpec>, String> {
    let settings = quadruped_settings(&cfg.quadruped, s.horizon_s);
    let horizon = settings.horizon;
    let body = NominalBody::new(s.body_mass_kg.unwrap_or(50.0), Matrix3::from_diagonal(&v3(&s.body_inertia_kgm2))).map_err(|e| e.to_string())?;
    let payload = InertialParameters::rigid_payload(
        s.payload_mass_kg.unwrap_or(0.0),
        v3(&s.payload_com_m),
        Matrix3::from_diagonal(&v3(&s.payload_inertia_kgm2)),
    );
    let height = s.base_height_m.unwrap_or(0.5);
    let feet = symmetric_feet(s.foot_half_length_m.unwrap_or(0.36), s.foot_half_width_m.unwrap_or(0.22), height);
    let duration = s.duration_s.unwrap_or(1.0);
    let finish = |mut sc: Scenario| {
        sc.payload = payload;
        sc.plant_substeps = s.plant_substeps.unwrap_or(10);
        sc.divergence_threshold = s.divergence_threshold_m.unwrap_or(1.0);
        sc.transient = s.transient_s.unwrap_or(0.2);
        sc.clamp_to_cone = s.clamp_to_cone.unwrap_or(true);
        sc.initial_perturbation = s.initial_perturbation.unwrap_or(0.0);
        sc.seed = s.seed.unwrap_or(0);
        sc
    };
    let spec = |name: String, force: f64, sc: Scenario| RunSpec {
        name,
        scenario: s.name.clone(),
        kind: s.kind,
        variant,
        horizon,
        force,
        run: RunKind::Quadruped(Box::new(sc)),
    };
    match s.kind {
        ScenarioKind::Standing => {
            let reference = StepReference::protocol(
                Vector3::new(0.0, 0.0, height),
                s.step_height_m.unwrap_or(0.0),
                s.step_angle_rad.unwrap_or(0.0),
                s.step_dwell_s.unwrap_or(1.0),
            );
            let sc = standing_scenario(&s.name, variant, settings, body, payload, feet, reference, duration);
            Ok(vec![spec(s.name.clone(), 0.0, finish(sc))])
        }
        ScenarioKind::Slope => {
            let walk = StaticWalk {
                start: 0.0,
                duration,
                slope: s.slope_deg.unwrap_or(0.0).to_radians(),
                speed: s.walk_speed_mps.unwrap_or(0.0),
                foot_offsets: feet,
                four_foot_phase: s.four_foot_phase_s.unwrap_or(0.2),
                swing_phase: s.swing_phase_s.unwrap_or(0.4),
            };
            let grid = s.force_grid_n.clone().unwrap_or_else(|| vec![0.0]);
            Ok(grid
                .iter()
                .map(|&f| {
                    let name = if grid.len() == 1 { s.name.clone() } else { format!("{}_{f}N", s.name) };
                    let sc = finish(slope_scenario(&name, variant, settings.clone(), body, walk.clone(), f));
                    spec(name, f, sc)
                })
                .collect())
        }
        ScenarioKind::Arm => unreachable!("arm scenarios are built separately"),
    }
}

fn arm_run(cfg: &ExperimentConfig, s: &ScenarioSection, variant: ControllerVariant) -> RunSpec {
    let duration = s.duration_s.unwrap_or(5.0);
    let mut sc = ArmScenario::tip_payload(&s.name, variant, s.tip_payload_kg.unwrap_or(0.0), duration);
    sc.settings = arm_settings(&cfg.arm, s.horizon_s);
    sc.reference = JointSinusoid {
        center: dv(&s.reference_center_rad),
        amplitude: dv(&s.reference_amplitude_rad),
        frequency: s.reference_frequency_rad_per_s.unwrap_or(0.0),
    };
    let start = sc.reference.sample(0.0);
    sc.initial = GeneralizedState::new(start.position + dv(&s.initial_offset_rad), start.velocity);
    sc.plant_substeps = s.plant_substeps.unwrap_or(10);
    sc.divergence_threshold = s.divergence_threshold_rad.unwrap_or(1.0);
    sc.transient = s.transient_s.unwrap_or(0.2);
    sc.seed = s.seed.unwrap_or(0);
    RunSpec {
        name: s.name.clone(),
        scenario: s.name.clone(),
        kind: s.kind,
        variant,
        horizon: sc.settings.horizon,
        force: 0.0,
        run: RunKind::Arm(Box::new(sc)),
    }
}

/// Expand a validated configuration into runs, checking each scenario.
pub fn build_runs(cfg: &ExperimentConfig) -> Result<Vec<RunSpec>, ConfigError> {
    let mut runs = Vec::new();
    let mut problems = Vec::new();
    for s in &cfg.scenarios {
        let variant = match s.variant.parse::<ControllerVariant>() {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("scenario '{}': {e}", s.name));
                continue;
            }
        };
        let built = match s.kind {
            ScenarioKind::Arm => Ok(vec![arm_run(cfg, s, variant)]),
            _ => quadruped_runs(cfg, s, variant),
        };
        match built {
            Ok(r) => runs.extend(r),
            Err(e) => problems.push(format!("scenario '{}': {e}", s.name)),
        }
    }
    for r in &runs {
        let checked = match &r.run {
            RunKind::Quadruped(sc) => sc.validate(),
            RunKind::Arm(sc) => sc.validate(),
        };
        if let Err(e) = checked {
            problems.push(e.to_string());
        }
    }
    if problems.is_empty() {
        Ok(runs)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

pub fn execute(run: &RunSpec) -> Result<RunOutcome, SimError> {
    match &run.run {
        RunKind::Quadruped(sc) => run_scenario(sc).map(RunOutcome::Quadruped),
        RunKind::Arm(sc) => run_arm_scenario(sc).map(RunOutcome::Arm),
    }
}

/// Execute all runs on up to `jobs` threads; results keep the run order.
pub fn execute_all(runs: &[RunSpec], jobs: usize) -> Vec<Result<RunOutcome, SimError>> {
    let execution = if jobs > 1 { Execution::best_available() } else { Execution::Sequential };
    with_threads(jobs.max(1), || map_slice(execution, runs, execute))
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub scenario: String,
    pub kind: ScenarioKind,
    pub variant: ControllerVariant,
    pub horizon: f64,
    pub force: f64,
    /// `None` when the run failed or hit an internal error.
    pub rmse: Option<(f64, f64)>,
    pub verdict: String,
    pub failure_time: Option<f64>,
}

/// Largest tolerated force per slope scenario with more than one force.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scenario: String,
    pub variant: ControllerVariant,
    pub forces: Vec<(f64, String)>,
    pub max_tolerated: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub sweeps: Vec<SweepRow>,
    /// Runs that ended with an internal error rather than a verdict.
    pub internal_errors: Vec<String>,
    pub outcomes: Vec<Option<RunOutcome>>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Run every scenario of `cfg` and write results under `experiment.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let runs = build_runs(cfg).map_err(|e| RunError::Io {
        path: cfg.experiment.output_dir.clone(),
        source: io::Error::new(io::ErrorKind::InvalidInput, e.to_string()),
    })?;
    let out = PathBuf::from(&cfg.experiment.output_dir);
    for d in [out.clone(), out.join("runs"), out.join("plot")] {
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    write(&out.join("resolved.cfg"), &cfg.to_file_string())?;
    let results = execute_all(&runs, cfg.experiment.jobs);

    let mut rows = Vec::with_capacity(runs.len());
    let mut internal_errors = Vec::new();
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut timing = String::from("run,t_s,solve_time_s,iterations\n");
    for (spec, result) in runs.iter().zip(results) {
        match result {
            Ok(o) => {
                write(&out.join("runs").join(format!("{}.csv", spec.name)), &run_csv(spec, &o))?;
                write(&out.join("plot").join(format!("{}.dat", spec.name)), &plot_data(spec, &o))?;
                append_timing(&mut timing, spec, &o);
                let stable = o.verdict().is_stable();
                rows.push(SummaryRow {
                    run: spec.name.clone(),
                    scenario: spec.scenario.clone(),
                    kind: spec.kind,
                    variant: spec.variant,
                    horizon: spec.horizon,
                    force: spec.force,
                    rmse: stable.then(|| o.rmse()),
                    verdict: o.verdict().name().to_string(),
                    failure_time: o.failure().0,
                });
                outcomes.push(Some(o));
            }
            Err(e) => {
                internal_errors.push(format!("{}: {e}", spec.name));
                rows.push(SummaryRow {
                    run: spec.name.clone(),
                    scenario: spec.scenario.clone(),
                    kind: spec.kind,
                    variant: spec.variant,
                    horizon: spec.horizon,
                    force: spec.force,
                    rmse: None,
                    verdict: "internal-error".into(),
                    failure_time: None,
                });
                outcomes.push(None);
            }
        }
    }
    let sweeps = sweep_rows(cfg, &rows);
    write(&out.join("summary.csv"), &summary_csv(&rows))?;
    write(&out.join("summary.txt"), &summary_text(&cfg.experiment.name, &rows))?;
    if !sweeps.is_empty() {
        write(&out.join("sweep.csv"), &sweep_csv(&sweeps))?;
        write(&out.join("sweep.txt"), &sweep_text(&sweeps))?;
    }
    if cfg.experiment.write_timing {
        write(&out.join("timing.csv"), &timing)?;
    }
    Ok(ExperimentReport {
        out_dir: out,
        rows,
        sweeps,
        internal_errors,
        outcomes,
    })
}

fn append_timing(buf: &mut String, spec: &RunSpec, o: &RunOutcome) {
    match o {
        RunOutcome::Quadruped(r) => {
            for l in &r.log {
                let _ = writeln!(buf, "{},{},{},{}", spec.name, l.t, l.solve_time, l.iterations);
            }
        }
        RunOutcome::Arm(r) => {
            for l in &r.log {
                let _ = writeln!(buf, "{},{},{},{}", spec.name, l.t, l.solve_time, l.iterations);
            }
        }
    }
}

fn join<I: IntoIterator<Item = f64>>(values: I, sep: &str) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn header(spec: &RunSpec, o: &RunOutcome, columns: &[(String, &str)]) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "# run: {}", spec.name);
    let _ = writeln!(h, "# scenario: {} ({})", spec.scenario, spec.kind.name());
    let _ = writeln!(h, "# variant: {} ({})", spec.variant, spec.variant.description());
    let _ = writeln!(h, "# horizon_s: {}", spec.horizon);
    if spec.kind == ScenarioKind::Slope {
        let _ = writeln!(h, "# external_force_n: {}", spec.force);
    }
    let _ = writeln!(h, "# verdict: {}", o.verdict().name());
    if let (Some(t), reason) = o.failure() {
        let _ = writeln!(h, "# failure: t = {t} s, {}", reason.unwrap_or(""));
    }
    let _ = writeln!(h, "# columns:");
    for (name, doc) in columns {
        let _ = writeln!(h, "#   {name}: {doc}");
    }
    h
}

/// Per-run log, one row per control step.
pub fn run_csv(spec: &RunSpec, o: &RunOutcome) -> String {
    match o {
        RunOutcome::Quadruped(r) => quadruped_csv(spec, o, r),
        RunOutcome::Arm(r) => arm_csv(spec, o, r),
    }
}

fn quadruped_csv(spec: &RunSpec, o: &RunOutcome, r: &ScenarioResult) -> String {
    let mut cols: Vec<(String, &str)> = vec![("t".into(), "time [s]")];
    for c in ["p_x", "p_y", "p_z"] {
        cols.push((c.into(), "CoM position, world [m]"));
    }
    for c in ["roll", "pitch", "yaw"] {
        cols.push((c.into(), "ZYX Euler angles [rad]"));
    }
    for c in ["vp_x", "vp_y", "vp_z"] {
        cols.push((c.into(), "CoM velocity, world [m/s]"));
    }
    for c in ["omega_x", "omega_y", "omega_z"] {
        cols.push((c.into(), "angular velocity, base [rad/s]"));
    }
    for c in ["p_ref_x", "p_ref_y", "p_ref_z"] {
        cols.push((c.into(), "reference CoM position [m]"));
    }
    for c in ["q_ref_w", "q_ref_x", "q_ref_y", "q_ref_z"] {
        cols.push((c.into(), "reference attitude quaternion"));
    }
    for foot in FOOT_NAMES {
        for a in ["x", "y", "z"] {
            cols.push((format!("f_{foot}_{a}"), "commanded foot force, base [N]"));
        }
    }
    for c in names("sigma_", 6) {
        cols.push((c, "composite error σ = v_r - v"));
    }
    cols.push(("h_clf".into(), "CLF constraint value at the commanded input"));
    cols.push(("lyapunov".into(), "V with the true parameters"));
    for c in names("pi_hat_", 16) {
        cols.push((c, "estimate: mass, first moment (3), inertia (6), force (3), torque (3)"));
    }
    for c in ["fu_x", "fu_y", "fu_z"] {
        cols.push((c.into(), "adaptive force Y_u π̂, base [N]"));
    }
    for c in ["tu_x", "tu_y", "tu_z"] {
        cols.push((c.into(), "adaptive torque Y_u π̂, base [N m]"));
    }
    cols.push(("residual".into(), "‖S w - Y_n π_n‖ of the commanded input"));
    cols.push(("estimate_gap".into(), "‖Y_u π̂ - Y_u π‖"));
    cols.push(("matched".into(), "1 when Y_u π̂ lies in the range of S"));
    for c in names("disturbance_", 6) {
        cols.push((c, "observer estimate of the external generalized force"));
    }
    cols.push(("iterations".into(), "SQP iterations"));
    cols.push(("converged".into(), "1 when the SQP converged"));
    cols.push(("kkt_residual".into(), "KKT residual of the last iterate"));
    cols.push(("max_violation".into(), "largest equality residual"));
    cols.push(("cost".into(), "objective value"));

    let mut s = header(spec, o, &cols);
    s.push_str(&cols.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join(","));
    s.push('\n');
    for l in &r.log {
        let st = &l.state;
        let q = l.q_ref.quaternion();
        let mut v: Vec<f64> = vec![l.t];
        v.extend(st.to_vector().iter());
        v.extend(l.p_ref.iter());
        v.extend([q.w, q.i, q.j, q.k]);
        for f in &l.input.forces {
            v.extend(f.iter());
        }
        v.extend(l.sigma.iter());
        v.push(l.h_clf);
        v.push(l.lyapunov);
        v.extend(l.pi_hat.iter());
        v.extend(l.adaptive_wrench.iter());
        v.push(l.residual);
        v.push(l.estimate_gap);
        v.push(if l.matched { 1.0 } else { 0.0 });
        v.extend(l.disturbance.iter());
        v.push(l.iterations as f64);
        v.push(if l.converged { 1.0 } else { 0.0 });
        v.extend([l.kkt_residual, l.max_violation, l.cost]);
        s.push_str(&join(v, ","));
        s.push('\n');
    }
    s
}

fn arm_csv(spec: &RunSpec, o: &RunOutcome, r: &ArmResult) -> String {
    let mut cols: Vec<(String, &str)> = vec![("t".into(), "time [s]")];
    for c in ["q1", "q2"] {
        cols.push((c.into(), "joint angle [rad]"));
    }
    for c in ["v1", "v2"] {
        cols.push((c.into(), "joint rate [rad/s]"));
    }
    for c in ["q_ref1", "q_ref2"] {
        cols.push((c.into(), "reference joint angle [rad]"));
    }
    for c in ["tau1", "tau2"] {
        cols.push((c.into(), "applied joint torque [N m]"));
    }
    for c in ["sigma1", "sigma2"] {
        cols.push((c.into(), "composite error σ = v_r - v"));
    }
    cols.push(("h_clf".into(), "CLF constraint value at the applied torque"));
    cols.push(("lyapunov".into(), "V with the true payload"));
    for c in names("pi_hat_", 4) {
        cols.push((c, "payload estimate: mass, first moment (2), inertia about joint 2"));
    }
    cols.push(("iterations".into(), "SQP iterations"));
    cols.push(("converged".into(), "1 when the SQP converged"));
    cols.push(("kkt_residual".into(), "KKT residual of the last iterate"));
    cols.push(("cost".into(), "objective value"));
    let mut s = header(spec, o, &cols);
    s.push_str(&cols.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join(","));
    s.push('\n');
    for l in &r.log {
        let mut v: Vec<f64> = vec![l.t];
        v.extend(l.state.q.iter());
        v.extend(l.state.v.iter());
        v.extend(l.q_ref.iter());
        v.extend(l.tau.iter());
        v.extend(l.sigma.iter());
        v.push(l.h_clf);
        v.push(l.lyapunov);
        v.extend(l.pi_hat.iter());
        v.push(l.iterations as f64);
        v.push(if l.converged { 1.0 } else { 0.0 });
        v.extend([l.kkt_residual, l.cost]);
        s.push_str(&join(v, ","));
        s.push('\n');
    }
    s
}

/// Whitespace-separated series for plotting: errors, σ, h_clf, V and π̂.
pub fn plot_data(spec: &RunSpec, o: &RunOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} {} T={}s", spec.name, spec.variant, spec.horizon);
    match o {
        RunOutcome::Quadruped(r) => {
            let mut cols = vec!["t", "e_lin_m", "e_ang_deg", "sigma_norm", "h_clf", "lyapunov", "residual", "estimate_gap"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            cols.extend(names("pi_hat_", 13));
            let _ = writeln!(s, "# {}", cols.join(" "));
            for l in &r.log {
                let e_ang = rotation_angle_between(&quaternion_from_euler(&l.state.theta), &l.q_ref).to_degrees();
                let mut v = vec![
                    l.t,
                    (l.state.p - l.p_ref).norm(),
                    e_ang,
                    l.sigma.norm(),
                    l.h_clf,
                    l.lyapunov,
                    l.residual,
                    l.estimate_gap,
                ];
                v.extend(l.pi_hat.iter().take(13));
                s.push_str(&join(v, " "));
                s.push('\n');
            }
        }
        RunOutcome::Arm(r) => {
            let RunKind::Arm(sc) = &spec.run else { unreachable!("outcome matches its run") };
            let mut cols = vec!["t", "e_joint_rad", "e_tip_m", "sigma_norm", "h_clf", "lyapunov"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            cols.extend(names("pi_hat_", 4));
            let _ = writeln!(s, "# {}", cols.join(" "));
            for l in &r.log {
                let mut v = vec![
                    l.t,
                    (&l.q_ref - &l.state.q).norm(),
                    (sc.tip(&l.state.q) - sc.tip(&l.q_ref)).norm(),
                    l.sigma.norm(),
                    l.h_clf,
                    l.lyapunov,
                ];
                v.extend(l.pi_hat.iter());
                s.push_str(&join(v, " "));
                s.push('\n');
            }
        }
    }
    s
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("run,scenario,kind,variant,horizon_s,force_n,linear_rmse_m,angular_rmse_deg,verdict,failure_time_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.scenario,
            r.kind.name(),
            r.variant,
            r.horizon,
            r.force,
            cell(r.rmse.map(|x| x.0), 6),
            cell(r.rmse.map(|x| x.1), 4),
            r.verdict,
            cell(r.failure_time, 3),
        );
    }
    s
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut s = line(header.to_vec());
    s.push('\n');
    s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r.iter().map(|c| c.as_str()).collect()));
        s.push('\n');
    }
    s
}

/// Aligned table; failed runs show "-" instead of RMSE values.
pub fn summary_text(experiment: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("Experiment: {experiment}\n");
    s.push_str("Linear RMSE is the CoM position error (tip position for the arm); angular RMSE is the attitude error (joint-error norm for the arm).\n\n");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.variant.to_string(),
                format!("{}", r.horizon),
                if r.kind == ScenarioKind::Slope { format!("{}", r.force) } else { "-".into() },
                cell(r.rmse.map(|x| x.0), 4),
                cell(r.rmse.map(|x| x.1), 2),
                r.verdict.clone(),
            ]
        })
        .collect();
    s.push_str(&aligned(
        &["run", "variant", "T [s]", "F [N]", "Linear RMSE [m]", "Angular RMSE [deg]", "verdict"],
        &body,
    ));
    s
}

fn sweep_rows(cfg: &ExperimentConfig, rows: &[SummaryRow]) -> Vec<SweepRow> {
    cfg.scenarios
        .iter()
        .filter(|s| s.kind == ScenarioKind::Slope && s.force_grid_n.as_ref().is_some_and(|g| g.len() > 1))
        .filter_map(|s| {
            let mine: Vec<&SummaryRow> = rows.iter().filter(|r| r.scenario == s.name).collect();
            let variant = mine.first()?.variant;
            let mut sorted = mine.clone();
            sorted.sort_by(|a, b| a.force.total_cmp(&b.force));
            let mut max_tolerated = None;
            for r in &sorted {
                if r.verdict != Verdict::Stable.name() {
                    break;
                }
                max_tolerated = Some(r.force);
            }
            Some(SweepRow {
                scenario: s.name.clone(),
                variant,
                forces: sorted.iter().map(|r| (r.force, r.verdict.clone())).collect(),
                max_tolerated,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("scenario,variant,force_n,verdict\n");
    for r in rows {
        for (f, v) in &r.forces {
            let _ = writeln!(s, "{},{},{f},{v}", r.scenario, r.variant);
        }
    }
    s
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.variant.to_string(),
                r.max_tolerated.map(|f| format!("{f}")).unwrap_or_else(|| "-".into()),
                r.forces
                    .iter()
                    .filter(|(_, v)| v != Verdict::Stable.name())
                    .map(|(f, _)| format!("{f}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            ]
        })
        .collect();
    aligned(&["scenario", "variant", "max tolerated force [N]", "failed at [N]"], &body)
}
