//! Short closed-loop runs: arm properties, zero-mismatch regulation, metrics,
//! and reproducibility.

use aclf::baselines::{ControllerSettings, ControllerVariant};
use aclf::manipulator::{run_arm_scenario, ArmScenario};
use aclf::mechanics::InertialParameters;
use aclf::ocp::{MultipleShootingNlp, OcpDefinition};
use aclf::parallel::Execution;
use aclf::quadruped::NominalBody;
use aclf::simlab::{compute_rmse, run_scenario, standing_scenario, symmetric_feet, Scenario, StepReference, TrackingSample, Verdict};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};

fn body() -> NominalBody {
    NominalBody::new(50.0, Matrix3::from_diagonal(&Vector3::new(1.5, 3.0, 3.5))).unwrap()
}

fn standing(variant: ControllerVariant, payload: InertialParameters, duration: f64) -> Scenario {
    let reference = StepReference::protocol(Vector3::new(0.0, 0.0, 0.5), 0.05, 0.15, 1.0);
    standing_scenario("t", variant, ControllerSettings::quadruped_defaults(), body(), payload, symmetric_feet(0.36, 0.22, 0.5), reference, duration)
}

#[test]
fn arm_lyapunov_function_never_exceeds_its_initial_value() {
    let sc = ArmScenario::tip_payload("aclf", ControllerVariant::AclfMpc, 0.5, 3.0);
    let result = run_arm_scenario(&sc).unwrap();
    assert_eq!(result.verdict, Verdict::Stable);
    let v0 = result.log[0].lyapunov;
    assert!(v0 > 0.0);
    for step in &result.log {
        assert!(step.lyapunov <= v0 + 1e-9, "V({}) = {} > V(0) = {v0}", step.t, step.lyapunov);
    }
    let tail = result.log.last().unwrap();
    assert!(tail.sigma.norm() < 0.05, "final σ {}", tail.sigma.norm());
}

#[test]
fn arm_adaptation_beats_the_nominal_model() {
    let run = |variant| run_arm_scenario(&ArmScenario::tip_payload("v", variant, 0.5, 3.0)).unwrap();
    let aclf = run(ControllerVariant::AclfMpc);
    let no_adapt = run(ControllerVariant::ClfMpcNoAdaptation);
    let nominal = run(ControllerVariant::NominalMpc);
    assert!(aclf.tip_rmse < 0.5 * no_adapt.tip_rmse, "{} vs {}", aclf.tip_rmse, no_adapt.tip_rmse);
    assert!(aclf.tip_rmse < 0.5 * nominal.tip_rmse, "{} vs {}", aclf.tip_rmse, nominal.tip_rmse);
    // estimates start at zero and move toward the payload
    let last = aclf.log.last().unwrap();
    assert!(last.pi_hat[0] > 0.0);
}

#[test]
fn arm_rejects_the_observer_variant() {
    let sc = ArmScenario::tip_payload("obs", ControllerVariant::MomentumObserverMpc, 0.5, 1.0);
    assert!(sc.validate().is_err());
}

#[test]
fn zero_mismatch_standing_regulates_tightly() {
    for variant in [ControllerVariant::NominalMpc, ControllerVariant::AclfMpc] {
        let hold = StepReference::hold(Vector3::new(0.0, 0.0, 0.5));
        let mut sc = standing_scenario("hold", variant, ControllerSettings::quadruped_defaults(), body(), InertialParameters::zero(), symmetric_feet(0.36, 0.22, 0.5), hold, 3.0);
        sc.initial_perturbation = 0.01;
        let result = run_scenario(&sc).unwrap();
        assert_eq!(result.verdict, Verdict::Stable);
        assert!(result.linear_rmse < 0.005, "{variant}: {}", result.linear_rmse);
    }
}

#[test]
fn rmse_skips_the_transient_and_measures_attitude_angle() {
    let q_ref = UnitQuaternion::identity();
    let tilted = UnitQuaternion::from_euler_angles(0.0, 2f64.to_radians(), 0.0);
    let samples: Vec<TrackingSample> = (0..10)
        .map(|k| TrackingSample {
            t: k as f64 * 0.1,
            p: if k < 2 { Vector3::new(5.0, 0.0, 0.0) } else { Vector3::new(0.03, 0.04, 0.0) },
            p_ref: Vector3::zeros(),
            q: tilted,
            q_ref,
        })
        .collect();
    let (lin, ang) = compute_rmse(&samples, 0.2);
    assert!((lin - 0.05).abs() < 1e-12);
    assert!((ang - 2.0).abs() < 1e-9);
}

#[test]
fn repeated_runs_are_identical() {
    let payload = InertialParameters::rigid_payload(20.0, Vector3::new(0.3, 0.0, 0.0), Matrix3::identity() * 0.05);
    let mut sc = standing(ControllerVariant::AclfMpc, payload, 1.5);
    sc.initial_perturbation = 0.01;
    sc.seed = 7;
    let a = run_scenario(&sc).unwrap();
    let b = run_scenario(&sc).unwrap();
    assert_eq!(a.log.len(), b.log.len());
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.state, y.state);
        assert_eq!(x.input, y.input);
        assert_eq!(x.pi_hat, y.pi_hat);
    }
    sc.seed = 8;
    let c = run_scenario(&sc).unwrap();
    assert_ne!(a.log[0].state, c.log[0].state);
}

#[test]
fn parallel_and_sequential_transcription_agree_exactly() {
    let payload = InertialParameters::rigid_payload(20.0, Vector3::new(0.3, 0.0, 0.0), Matrix3::identity() * 0.05);
    let sc = standing(ControllerVariant::PerfectModelMpc, payload, 1.5);
    let controller = aclf::baselines::make_controller(
        sc.variant,
        sc.settings.clone(),
        aclf::baselines::Task {
            body: sc.body,
            schedule: sc.schedule.clone(),
            reference: sc.reference.clone(),
        },
        Some(sc.truth()),
        &sc.initial,
    )
    .unwrap();
    let def = OcpDefinition {
        horizon: sc.settings.horizon,
        nodes: sc.settings.nodes,
        q: sc.settings.q.clone(),
        r: sc.settings.r.clone(),
        terminal: controller.terminal().cloned(),
        barrier: sc.settings.barrier,
        schedule: sc.schedule.mode_schedule(),
        model: std::sync::Arc::new(controller.model()),
    };
    let mut x0 = sc.initial;
    x0.p.z += 0.02;
    let nlp = MultipleShootingNlp::transcribe(&def, &x0.to_dvector(), 0.0).unwrap();
    let guess = nlp.initial_guess().unwrap();
    let seq = nlp.clone().with_execution(Execution::Sequential).linearize(&guess).unwrap();
    let par = nlp.with_execution(Execution::best_available()).linearize(&guess).unwrap();
    for (a, b) in seq.stages.iter().zip(&par.stages) {
        assert_eq!(a.a, b.a);
        assert_eq!(a.b, b.b);
        assert_eq!(a.defect, b.defect);
        assert_eq!(a.gx, b.gx);
    }
}
