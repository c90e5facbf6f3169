//! Experiment configuration files.
//!
//! A `.cfg` file is TOML: an `[experiment]` table, the controller tables
//! `[quadruped]` and `[arm]`, and one `[[scenario]]` entry per scenario.
//! Every key carries its unit in its name. Unknown keys are rejected and all
//! defaults are materialized on load, so the resolved file written next to the
//! results describes the run completely.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use aclf::baselines::{ControllerSettings, ControllerVariant};
use aclf::linalg::{asymmetry, min_symmetric_eigenvalue};
use aclf::manipulator::ArmSettings;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("bad override '{0}': {1}")]
    Override(String, String),
    #[error("invalid configuration:\n{}", format_violations(.0))]
    Invalid(Vec<String>),
}

fn format_violations(v: &[String]) -> String {
    v.iter().map(|s| format!("  - {s}")).collect::<Vec<_>>().join("\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub quadruped: QuadrupedSection,
    pub arm: ArmSection,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            quadruped: QuadrupedSection::default(),
            arm: ArmSection::default(),
            scenarios: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: String,
    pub jobs: usize,
    /// Base seed; scenarios without their own seed get `seed + index`.
    pub seed: u64,
    /// Also write wall-clock solve times (`timing.csv`); these differ between reruns.
    pub write_timing: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: "out".into(),
            jobs: 1,
            seed: 0,
            write_timing: false,
        }
    }
}

/// Tuning shared by all quadruped scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrupedSection {
    pub horizon_s: f64,
    pub nodes: usize,
    /// Diagonal of Q for `(p, θ, v_p, ω)`.
    pub state_weights: Vec<f64>,
    /// R = input_weight·I.
    pub input_weight: f64,
    pub barrier_mu: f64,
    pub barrier_delta: f64,
    pub sqp_iterations: usize,
    pub sqp_tolerance: f64,
    pub friction_coefficient: f64,
    pub cone_smoothing_n: f64,
    pub lambda_linear_per_s: f64,
    pub lambda_rotational_per_s: f64,
    pub kd_linear: f64,
    pub kd_rotational: f64,
    /// Diagonal of Γ: mass, first moment (3), inertia (6), force (3), torque (3).
    pub gamma_diag: Vec<f64>,
    /// Full Γ; replaces `gamma_diag` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_matrix: Option<Vec<Vec<f64>>>,
    pub estimate_scale: Vec<f64>,
    pub bound_factor: f64,
    pub freeze_torque: bool,
    pub nonnegative_mass: bool,
    pub observer_gain_per_s: f64,
    pub control_period_s: f64,
    pub parallel_transcription: bool,
}

impl Default for QuadrupedSection {
    fn default() -> Self {
        let s = ControllerSettings::quadruped_defaults();
        Self {
            horizon_s: s.horizon,
            nodes: s.nodes,
            state_weights: s.q.diagonal().iter().copied().collect(),
            input_weight: s.r[(0, 0)],
            barrier_mu: s.barrier.mu,
            barrier_delta: s.barrier.delta,
            sqp_iterations: s.sqp.max_iterations,
            sqp_tolerance: s.sqp.tolerance,
            friction_coefficient: s.friction,
            cone_smoothing_n: s.cone_smoothing,
            lambda_linear_per_s: s.clf.lambda_linear[(0, 0)],
            lambda_rotational_per_s: s.clf.lambda_rotational[(0, 0)],
            kd_linear: s.clf.kd[(0, 0)],
            kd_rotational: s.clf.kd[(3, 3)],
            gamma_diag: s.gamma.diagonal().iter().copied().collect(),
            gamma_matrix: None,
            estimate_scale: s.estimate_scale.iter().copied().collect(),
            bound_factor: s.bound_factor,
            freeze_torque: s.freeze_torque,
            nonnegative_mass: s.nonnegative_mass,
            observer_gain_per_s: s.observer_gain[(0, 0)],
            control_period_s: s.control_period,
            parallel_transcription: false,
        }
    }
}

/// Tuning of the two-link-arm scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmSection {
    pub horizon_s: f64,
    pub nodes: usize,
    /// Diagonal of Q for `(q, v)`.
    pub state_weights: Vec<f64>,
    pub input_weight: f64,
    pub barrier_mu: f64,
    pub barrier_delta: f64,
    pub sqp_iterations: usize,
    pub lambda_per_s: f64,
    pub kd: f64,
    /// Diagonal of Γ: mass, first moment (2), inertia.
    pub gamma_diag: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_matrix: Option<Vec<Vec<f64>>>,
    pub estimate_scale: Vec<f64>,
    pub bound_factor: f64,
    pub clf_projection: bool,
    pub control_period_s: f64,
}

impl Default for ArmSection {
    fn default() -> Self {
        let s = ArmSettings::defaults();
        Self {
            horizon_s: s.horizon,
            nodes: s.nodes,
            state_weights: s.q.diagonal().iter().copied().collect(),
            input_weight: s.r[(0, 0)],
            barrier_mu: s.barrier.mu,
            barrier_delta: s.barrier.delta,
            sqp_iterations: s.sqp.max_iterations,
            lambda_per_s: s.lambda,
            kd: s.kd,
            gamma_diag: s.gamma.diagonal().iter().copied().collect(),
            gamma_matrix: None,
            estimate_scale: s.estimate_scale.iter().copied().collect(),
            bound_factor: s.bound_factor,
            clf_projection: s.clf_projection,
            control_period_s: s.control_period,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Quadruped standing on flat ground, step references in height, pitch and roll.
    Standing,
    /// Quadruped static walk up a slope against a constant force.
    Slope,
    /// Two-link arm tracking a joint sinusoid with an unknown tip payload.
    Arm,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Standing => "standing",
            Self::Slope => "slope",
            Self::Arm => "arm",
        }
    }

    fn quadruped(self) -> bool {
        self != Self::Arm
    }
}

/// One `[[scenario]]` entry. Keys that do not apply to the scenario's kind
/// must be left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub kind: ScenarioKind,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    /// Overrides the controller horizon for this scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transient_s: Option<f64>,

    // quadruped
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_mass_kg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_inertia_kgm2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foot_half_length_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foot_half_width_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_height_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_mass_kg: Option<f64>,
    /// Payload CoM relative to the nominal CoM, base frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_com_m: Option<Vec<f64>>,
    /// Payload inertia diagonal about its own CoM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_inertia_kgm2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_threshold_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_to_cone: Option<bool>,
    /// Uniform initial perturbation of position [m] and attitude [rad].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_perturbation: Option<f64>,

    // standing
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_height_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_angle_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_dwell_s: Option<f64>,

    // slope
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_speed_mps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub four_foot_phase_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swing_phase_s: Option<f64>,
    /// Constant forces opposing the walk; one run per entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_grid_n: Option<Vec<f64>>,

    // arm
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_payload_kg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_center_rad: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_amplitude_rad: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_frequency_rad_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_offset_rad: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_threshold_rad: Option<f64>,
}

impl ScenarioSection {
    pub fn new(name: &str, kind: ScenarioKind, variant: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            variant: variant.into(),
            duration_s: None,
            horizon_s: None,
            seed: None,
            plant_substeps: None,
            transient_s: None,
            body_mass_kg: None,
            body_inertia_kgm2: None,
            foot_half_length_m: None,
            foot_half_width_m: None,
            base_height_m: None,
            payload_mass_kg: None,
            payload_com_m: None,
            payload_inertia_kgm2: None,
            divergence_threshold_m: None,
            clamp_to_cone: None,
            initial_perturbation: None,
            step_height_m: None,
            step_angle_rad: None,
            step_dwell_s: None,
            slope_deg: None,
            walk_speed_mps: None,
            four_foot_phase_s: None,
            swing_phase_s: None,
            force_grid_n: None,
            tip_payload_kg: None,
            reference_center_rad: None,
            reference_amplitude_rad: None,
            reference_frequency_rad_per_s: None,
            initial_offset_rad: None,
            divergence_threshold_rad: None,
        }
    }

    /// Fill every key of this kind with its default and report keys set for
    /// another kind.
    fn materialize(&mut self, seed: u64, problems: &mut Vec<String>) {
        use ScenarioKind::*;
        let kind = self.kind;
        let name = self.name.clone();
        let mut bad = |key: &str| problems.push(format!("scenario '{name}': key `{key}` does not apply to kind {}", kind.name()));
        macro_rules! fill {
            ($field:ident, $applies:expr, $default:expr) => {
                if $applies {
                    if self.$field.is_none() {
                        self.$field = Some($default);
                    }
                } else if self.$field.is_some() {
                    bad(stringify!($field));
                }
            };
        }
        let q = kind.quadruped();
        fill!(duration_s, true, match kind {
            Standing => 16.0,
            Slope => 8.0,
            Arm => 5.0,
        });
        fill!(seed, true, seed);
        fill!(plant_substeps, true, 10);
        fill!(transient_s, true, 0.2);
        fill!(body_mass_kg, q, 50.0);
        fill!(body_inertia_kgm2, q, vec![1.5, 3.0, 3.5]);
        fill!(foot_half_length_m, q, 0.36);
        fill!(foot_half_width_m, q, 0.22);
        fill!(base_height_m, q, 0.5);
        fill!(payload_mass_kg, q, if kind == Standing { 20.0 } else { 0.0 });
        fill!(payload_com_m, q, vec![if kind == Standing { 0.3 } else { 0.0 }, 0.0, 0.0]);
        fill!(payload_inertia_kgm2, q, vec![0.05, 0.05, 0.05]);
        fill!(divergence_threshold_m, q, 1.0);
        fill!(clamp_to_cone, q, true);
        fill!(initial_perturbation, q, 0.0);
        fill!(step_height_m, kind == Standing, 0.05);
        fill!(step_angle_rad, kind == Standing, 0.15);
        fill!(step_dwell_s, kind == Standing, 2.0);
        fill!(slope_deg, kind == Slope, 10.0);
        fill!(walk_speed_mps, kind == Slope, 0.05);
        fill!(four_foot_phase_s, kind == Slope, 0.2);
        fill!(swing_phase_s, kind == Slope, 0.4);
        fill!(force_grid_n, kind == Slope, vec![0.0]);
        fill!(tip_payload_kg, kind == Arm, 0.5);
        fill!(reference_center_rad, kind == Arm, vec![-0.5, 0.8]);
        fill!(reference_amplitude_rad, kind == Arm, vec![0.4, 0.4]);
        fill!(reference_frequency_rad_per_s, kind == Arm, 2.0);
        fill!(initial_offset_rad, kind == Arm, vec![0.2, -0.2]);
        fill!(divergence_threshold_rad, kind == Arm, 1.0);
    }
}

/// `Γ` from either the full matrix or the diagonal.
pub fn gamma_of(diag: &[f64], matrix: &Option<Vec<Vec<f64>>>) -> DMatrix<f64> {
    match matrix {
        Some(rows) => {
            let n = rows.len();
            DMatrix::from_fn(n, n, |i, j| rows[i].get(j).copied().unwrap_or(f64::NAN))
        }
        None => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)),
    }
}

fn check_gamma(what: &str, diag: &[f64], matrix: &Option<Vec<Vec<f64>>>, dim: usize, problems: &mut Vec<String>) {
    if let Some(rows) = matrix {
        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
            problems.push(format!("{what}.gamma_matrix must be {dim}×{dim}"));
            return;
        }
    } else if diag.len() != dim {
        problems.push(format!("{what}.gamma_diag needs {dim} entries, got {}", diag.len()));
        return;
    }
    let g = gamma_of(diag, matrix);
    if g.iter().any(|x| !x.is_finite()) {
        problems.push(format!("{what}: Γ has non-finite entries"));
        return;
    }
    if asymmetry(&g) > 1e-12 * g.amax().max(1.0) {
        problems.push(format!("{what}: Γ is not symmetric"));
        return;
    }
    let eig = min_symmetric_eigenvalue(&g);
    if eig <= 0.0 {
        problems.push(format!("{what}: Γ is not positive definite (smallest eigenvalue {eig:.6e})"));
    }
}

fn positive(problems: &mut Vec<String>, key: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        problems.push(format!("{key} must be positive, got {v}"));
    }
}

fn length(problems: &mut Vec<String>, key: &str, v: &[f64], n: usize) {
    if v.len() != n {
        problems.push(format!("{key} needs {n} entries, got {}", v.len()));
    } else if v.iter().any(|x| !x.is_finite()) {
        problems.push(format!("{key} has non-finite entries"));
    }
}

impl QuadrupedSection {
    fn validate(&self, p: &mut Vec<String>) {
        positive(p, "quadruped.horizon_s", self.horizon_s);
        if self.nodes < 2 {
            p.push("quadruped.nodes must be at least 2".into());
        }
        length(p, "quadruped.state_weights", &self.state_weights, 12);
        if self.state_weights.iter().any(|&w| w < 0.0) {
            p.push("quadruped.state_weights must be nonnegative".into());
        }
        positive(p, "quadruped.input_weight", self.input_weight);
        positive(p, "quadruped.barrier_mu", self.barrier_mu);
        positive(p, "quadruped.barrier_delta", self.barrier_delta);
        if self.sqp_iterations == 0 {
            p.push("quadruped.sqp_iterations must be at least 1".into());
        }
        positive(p, "quadruped.sqp_tolerance", self.sqp_tolerance);
        positive(p, "quadruped.friction_coefficient", self.friction_coefficient);
        positive(p, "quadruped.cone_smoothing_n", self.cone_smoothing_n);
        positive(p, "quadruped.lambda_linear_per_s", self.lambda_linear_per_s);
        positive(p, "quadruped.lambda_rotational_per_s", self.lambda_rotational_per_s);
        positive(p, "quadruped.kd_linear", self.kd_linear);
        positive(p, "quadruped.kd_rotational", self.kd_rotational);
        check_gamma("quadruped", &self.gamma_diag, &self.gamma_matrix, 16, p);
        length(p, "quadruped.estimate_scale", &self.estimate_scale, 16);
        positive(p, "quadruped.bound_factor", self.bound_factor);
        positive(p, "quadruped.observer_gain_per_s", self.observer_gain_per_s);
        positive(p, "quadruped.control_period_s", self.control_period_s);
    }
}

impl ArmSection {
    fn validate(&self, p: &mut Vec<String>) {
        positive(p, "arm.horizon_s", self.horizon_s);
        if self.nodes < 2 {
            p.push("arm.nodes must be at least 2".into());
        }
        length(p, "arm.state_weights", &self.state_weights, 4);
        if self.state_weights.iter().any(|&w| w < 0.0) {
            p.push("arm.state_weights must be nonnegative".into());
        }
        positive(p, "arm.input_weight", self.input_weight);
        positive(p, "arm.barrier_mu", self.barrier_mu);
        positive(p, "arm.barrier_delta", self.barrier_delta);
        if self.sqp_iterations == 0 {
            p.push("arm.sqp_iterations must be at least 1".into());
        }
        positive(p, "arm.lambda_per_s", self.lambda_per_s);
        positive(p, "arm.kd", self.kd);
        check_gamma("arm", &self.gamma_diag, &self.gamma_matrix, 4, p);
        length(p, "arm.estimate_scale", &self.estimate_scale, 4);
        positive(p, "arm.bound_factor", self.bound_factor);
        positive(p, "arm.control_period_s", self.control_period_s);
    }
}

impl ScenarioSection {
    fn validate(&self, cfg: &ExperimentConfig, p: &mut Vec<String>) {
        let n = &self.name;
        let key = |k: &str| format!("scenario '{n}': {k}");
        match self.variant.parse::<ControllerVariant>() {
            Ok(ControllerVariant::MomentumObserverMpc) if self.kind == ScenarioKind::Arm => {
                p.push(key("variant MomentumObserverMpc is not available for the arm"))
            }
            Ok(_) => {}
            Err(e) => p.push(key(&e.to_string())),
        }
        let horizon = self.horizon_s.unwrap_or(match self.kind {
            ScenarioKind::Arm => cfg.arm.horizon_s,
            _ => cfg.quadruped.horizon_s,
        });
        if let Some(h) = self.horizon_s {
            positive(p, &key("horizon_s"), h);
        }
        if let Some(d) = self.duration_s {
            if !(d > horizon) {
                p.push(key(&format!("duration_s {d} must exceed the horizon {horizon}")));
            }
        }
        if self.plant_substeps == Some(0) {
            p.push(key("plant_substeps must be positive"));
        }
        if let Some(t) = self.transient_s {
            if !(t >= 0.0) {
                p.push(key("transient_s must be nonnegative"));
            }
        }
        let vec_len = |p: &mut Vec<String>, k: &str, v: &Option<Vec<f64>>, len: usize| {
            if let Some(v) = v {
                length(p, &key(k), v, len);
            }
        };
        vec_len(p, "body_inertia_kgm2", &self.body_inertia_kgm2, 3);
        vec_len(p, "payload_com_m", &self.payload_com_m, 3);
        vec_len(p, "payload_inertia_kgm2", &self.payload_inertia_kgm2, 3);
        vec_len(p, "reference_center_rad", &self.reference_center_rad, 2);
        vec_len(p, "reference_amplitude_rad", &self.reference_amplitude_rad, 2);
        vec_len(p, "initial_offset_rad", &self.initial_offset_rad, 2);
        for (k, v) in [
            ("body_mass_kg", self.body_mass_kg),
            ("base_height_m", self.base_height_m),
            ("foot_half_length_m", self.foot_half_length_m),
            ("foot_half_width_m", self.foot_half_width_m),
            ("divergence_threshold_m", self.divergence_threshold_m),
            ("divergence_threshold_rad", self.divergence_threshold_rad),
            ("step_dwell_s", self.step_dwell_s),
            ("four_foot_phase_s", self.four_foot_phase_s),
            ("swing_phase_s", self.swing_phase_s),
        ] {
            if let Some(v) = v {
                positive(p, &key(k), v);
            }
        }
        for (k, v) in [("payload_mass_kg", self.payload_mass_kg), ("tip_payload_kg", self.tip_payload_kg)] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    p.push(key(&format!("{k} must be nonnegative, got {v}")));
                }
            }
        }
        if let Some(b) = &self.body_inertia_kgm2 {
            if b.iter().any(|&x| !(x > 0.0)) {
                p.push(key("body_inertia_kgm2 must be positive"));
            }
        }
        if let Some(b) = &self.payload_inertia_kgm2 {
            if b.iter().any(|&x| x < 0.0) {
                p.push(key("payload_inertia_kgm2 must be nonnegative"));
            }
        }
        if let Some(g) = &self.force_grid_n {
            if g.is_empty() {
                p.push(key("force_grid_n must not be empty"));
            } else if g.windows(2).any(|w| !(w[1] > w[0])) {
                p.push(key("force_grid_n must increase strictly"));
            }
        }
    }
}

impl ExperimentConfig {
    /// Fill defaults and check everything; lists every violation found.
    pub fn materialize(&mut self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.scenarios.is_empty() {
            problems.push("no scenarios".to_string());
        }
        let base = self.experiment.seed;
        for (i, s) in self.scenarios.iter_mut().enumerate() {
            s.materialize(base.wrapping_add(i as u64), &mut problems);
        }
        self.validate_into(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    fn validate_into(&self, p: &mut Vec<String>) {
        if self.experiment.jobs == 0 {
            p.push("experiment.jobs must be at least 1".into());
        }
        if self.experiment.name.trim().is_empty() {
            p.push("experiment.name must not be empty".into());
        }
        let mut seen = HashSet::new();
        for s in &self.scenarios {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                p.push(format!("scenario name '{}' must be non-empty and use only letters, digits, '_' or '-'", s.name));
            }
            if !seen.insert(s.name.clone()) {
                p.push(format!("scenario name '{}' is used twice", s.name));
            }
        }
        if self.scenarios.iter().any(|s| s.kind.quadruped()) {
            self.quadruped.validate(p);
        }
        if self.scenarios.iter().any(|s| s.kind == ScenarioKind::Arm) {
            self.arm.validate(p);
        }
        for s in &self.scenarios {
            s.validate(self, p);
        }
    }

    /// Resolved configuration as file text.
    pub fn to_file_string(&self) -> String {
        let body = toml::to_string(self).expect("configuration is always serializable");
        format!("# resolved configuration of experiment '{}'\n\n{body}", self.experiment.name)
    }
}

/// Parse configuration text, apply `key=value` overrides, materialize and validate.
pub fn parse_str(text: &str, origin: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let parse_err = |e: toml::de::Error| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    };
    // Schema errors in the file itself are reported against the original text so they carry a line.
    toml::from_str::<ExperimentConfig>(text).map_err(parse_err)?;
    let mut cfg = ExperimentConfig::deserialize(table).map_err(parse_err)?;
    cfg.materialize()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_str(&text, &path.display().to_string(), overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `section.key=value`, or `scenario.NAME.key=value` / `scenario.*.key=value`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(assignment.to_string(), m.to_string());
    let (path, raw) = assignment.split_once('=').ok_or_else(|| err("expected key=value"))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    let value = parse_value(raw.trim());
    match parts.as_slice() {
        ["scenario", name, key] => {
            let list = table
                .get_mut("scenario")
                .and_then(|v| v.as_array_mut())
                .ok_or_else(|| err("the configuration has no scenarios"))?;
            let mut hit = false;
            for s in list.iter_mut().filter_map(|v| v.as_table_mut()) {
                if *name == "*" || s.get("name").and_then(|n| n.as_str()) == Some(*name) {
                    s.insert(key.to_string(), value.clone());
                    hit = true;
                }
            }
            if hit {
                Ok(())
            } else {
                Err(err(&format!("no scenario named '{name}'")))
            }
        }
        [section, key] if *section != "scenario" => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let t = entry.as_table_mut().ok_or_else(|| err("not a table"))?;
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(err("expected section.key or scenario.NAME.key")),
    }
}

/// Default values of every key, as shown by `--help`.
pub fn default_table() -> String {
    let mut out = String::new();
    let mut cfg = ExperimentConfig::default();
    cfg.scenarios = vec![
        ScenarioSection::new("<standing>", ScenarioKind::Standing, "AclfMpc"),
        ScenarioSection::new("<slope>", ScenarioKind::Slope, "AclfMpc"),
        ScenarioSection::new("<arm>", ScenarioKind::Arm, "AclfMpc"),
    ];
    let mut ignored = Vec::new();
    for (i, s) in cfg.scenarios.iter_mut().enumerate() {
        s.materialize(i as u64, &mut ignored);
        s.seed = None;
    }
    let _ = writeln!(out, "Defaults (a scenario's `seed` defaults to experiment.seed + its index):\n");
    out.push_str(&toml::to_string(&cfg).expect("serializable"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[scenario]]
name = "a"
kind = "standing"
variant = "AclfMpc"
"#;

    #[test]
    fn defaults_are_materialized() {
        let c = parse_str(MINIMAL, "t", &[]).unwrap();
        let s = &c.scenarios[0];
        assert_eq!(s.duration_s, Some(16.0));
        assert_eq!(s.payload_mass_kg, Some(20.0));
        assert_eq!(s.slope_deg, None);
        assert_eq!(c.quadruped.nodes, 21);
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let e = parse_str("[experiment]\nnmae = \"x\"\n", "t", &[]).unwrap_err();
        let m = e.to_string();
        assert!(m.contains("nmae"), "{m}");
        assert!(m.contains("line 2"), "{m}");
    }

    #[test]
    fn empty_file_has_no_scenarios() {
        let e = parse_str("", "t", &[]).unwrap_err();
        assert!(e.to_string().contains("no scenarios"));
    }

    #[test]
    fn foreign_kind_keys_and_all_violations_are_listed() {
        let text = format!("{MINIMAL}slope_deg = 5\nbody_mass_kg = -1\n[quadruped]\nnodes = 1\n");
        let ConfigError::Invalid(v) = parse_str(&text, "t", &[]).unwrap_err() else {
            panic!("expected validation error")
        };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn indefinite_gamma_reports_eigenvalue() {
        let rows: Vec<String> = (0..4)
            .map(|i| {
                let r: Vec<&str> = (0..4).map(|j| if i == j { if i == 2 { "-0.5" } else { "1.0" } } else { "0.0" }).collect();
                format!("[{}]", r.join(", "))
            })
            .collect();
        let text = format!(
            "[arm]\ngamma_matrix = [{}]\n[[scenario]]\nname = \"a\"\nkind = \"arm\"\nvariant = \"AclfMpc\"\n",
            rows.join(", ")
        );
        let m = parse_str(&text, "t", &[]).unwrap_err().to_string();
        assert!(m.contains("-5.000000e-1"), "{m}");
    }

    #[test]
    fn overrides_reach_sections_and_scenarios() {
        let o = vec!["quadruped.horizon_s=0.5".to_string(), "scenario.a.duration_s=3".to_string()];
        let c = parse_str(MINIMAL, "t", &o).unwrap();
        assert_eq!(c.quadruped.horizon_s, 0.5);
        assert_eq!(c.scenarios[0].duration_s, Some(3.0));
        assert!(parse_str(MINIMAL, "t", &["scenario.zz.duration_s=3".into()]).is_err());
    }

    #[test]
    fn resolved_file_round_trips() {
        let c = parse_str(MINIMAL, "t", &[]).unwrap();
        let again = parse_str(&c.to_file_string(), "t", &[]).unwrap();
        assert_eq!(c, again);
    }
}
