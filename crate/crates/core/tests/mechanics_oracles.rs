//! Dynamics checked against independently assembled oracles.

use std::sync::Arc;
use std::time::Instant;

use aclf::mechanics::rotation::rotation_zyx;
use aclf::mechanics::{
    rigid_body_regressor, true_forward_dynamics, Actuation, FloatingBody, GeneralizedState, InertialParameters,
    MechanicalModel, PlanarLink, PlantTruth, TwoLinkArm, GRAVITY,
};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix6, Rotation2, Vector2, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 1000;

fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

fn uniform3(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn uniform6(rng: &mut ChaCha8Rng, r: f64) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.random_range(-r..r))
}

/// Mass, CoM and a positive definite inertia about the CoM.
fn random_body(rng: &mut ChaCha8Rng) -> (f64, Vector3<f64>, Matrix3<f64>) {
    let m = rng.random_range(0.1..30.0);
    let c = uniform3(rng, 0.5);
    let a = Matrix3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    (m, c, a * a.transpose() + Matrix3::identity() * 0.01)
}

fn random_euler(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.4..1.4), rng.random_range(-3.0..3.0))
}

/// Body-frame spatial inertia about the body origin, ordered (linear, angular),
/// assembled from mass, CoM and CoM inertia.
fn spatial_inertia(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> Matrix6<f64> {
    let h = skew(&(m * c));
    let io = ic - m * skew(c) * skew(c);
    let mut s = Matrix6::zeros();
    s.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * m));
    s.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-h));
    s.fixed_view_mut::<3, 3>(3, 0).copy_from(&h);
    s.fixed_view_mut::<3, 3>(3, 3).copy_from(&io);
    s
}

fn parameter_vector(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> DVector<f64> {
    let h = m * c;
    let io = ic - m * skew(c) * skew(c);
    DVector::from_column_slice(&[
        m,
        h.x,
        h.y,
        h.z,
        io[(0, 0)],
        io[(0, 1)],
        io[(0, 2)],
        io[(1, 1)],
        io[(1, 2)],
        io[(2, 2)],
    ])
}

/// `M v̇_r + C v_r + g` for a rigid body with generalized velocity
/// `(world linear velocity, body angular velocity)`.
///
/// With `X = diag(Rᵀ, I)` mapping generalized to body-frame twists:
/// `M = Xᵀ I X`, `C = Xᵀ C_b(ω) X + Xᵀ I Ẋ`, `g = -Xᵀ I (Rᵀ g_w, 0)`, where
/// `C_b(ω) = [[m ω×, -ω× h×], [h× ω×, -(I_o ω)×]]` is skew-symmetric.
fn spatial_inverse_dynamics(
    inertia: &Matrix6<f64>,
    r: &Matrix3<f64>,
    omega: &Vector3<f64>,
    vr: &Vector6<f64>,
    vr_dot: &Vector6<f64>,
) -> Vector6<f64> {
    let m = inertia[(0, 0)];
    let h = inertia.fixed_view::<3, 3>(3, 0).into_owned();
    let io = inertia.fixed_view::<3, 3>(3, 3).into_owned();
    let w = skew(omega);

    let mut x = Matrix6::identity();
    x.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
    let mut x_dot = Matrix6::zeros();
    x_dot.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-w * r.transpose()));

    let mut cb = Matrix6::zeros();
    cb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(w * m));
    cb.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-w * h));
    cb.fixed_view_mut::<3, 3>(3, 0).copy_from(&(h * w));
    cb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-skew(&(io * omega))));
    assert!((cb + cb.transpose()).amax() < 1e-12);

    let mass = x.transpose() * inertia * x;
    let coriolis = x.transpose() * cb * x + x.transpose() * inertia * x_dot;
    let gw = Vector3::new(0.0, 0.0, -GRAVITY);
    let rg = r.transpose() * gw;
    let gravity = -x.transpose() * inertia * Vector6::new(rg.x, rg.y, rg.z, 0.0, 0.0, 0.0);
    mass * vr_dot + coriolis * vr + gravity
}

#[test]
fn rigid_body_regressor_matches_spatial_inertia_assembly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let (m, c, ic) = random_body(&mut rng);
        let r = rotation_zyx(&random_euler(&mut rng));
        let omega = uniform3(&mut rng, 3.0);
        let vr = uniform6(&mut rng, 2.0);
        let vr_dot = uniform6(&mut rng, 5.0);

        let pi = parameter_vector(m, &c, &ic);
        let stored = InertialParameters::rigid_payload(m, c, ic).to_vector();
        assert!((&pi - DVector::from_column_slice(stored.as_slice())).amax() < 1e-12);

        let y = rigid_body_regressor(&r, &omega, &vr, &vr_dot);
        let lhs = DMatrix::from_column_slice(6, 10, y.as_slice()) * &pi;
        let rhs = spatial_inverse_dynamics(&spatial_inertia(m, &c, &ic), &r, &omega, &vr, &vr_dot);
        let rel = (lhs - DVector::from_column_slice(rhs.as_slice())).norm() / rhs.norm().max(1.0);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-9, "worst relative error {worst:.3e}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn floating_body_model_agrees_with_its_regressor() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let body = FloatingBody::new(InertialParameters::centered(50.0, Matrix3::identity()), Actuation::Wrench);
    for _ in 0..200 {
        let (m, c, ic) = random_body(&mut rng);
        let pi = parameter_vector(m, &c, &ic);
        let theta = random_euler(&mut rng);
        let q = DVector::from_column_slice(&[0.1, -0.2, 0.5, theta.x, theta.y, theta.z]);
        let state = GeneralizedState::new(q, DVector::from_column_slice(uniform6(&mut rng, 2.0).as_slice()));
        let vr = DVector::from_column_slice(uniform6(&mut rng, 2.0).as_slice());
        let vr_dot = DVector::from_column_slice(uniform6(&mut rng, 5.0).as_slice());
        let y = body.regressor_reference(&state, &vr, &vr_dot).unwrap();
        let direct = body.uncertain_terms(&state, &pi).unwrap().inverse_dynamics(&vr_dot, &vr);
        assert!((y * &pi - &direct).norm() <= 1e-10 * direct.norm().max(1.0));
    }
}

/// Terms of a planar body rigidly attached to link 2, from its kinetic and
/// potential energy: Christoffel-symbol Coriolis matrix and `∂U/∂q`.
fn planar_payload_terms(l1: f64, link: &PlanarLink, q: &Vector2<f64>, v: &Vector2<f64>) -> (Matrix2<f64>, Matrix2<f64>, Vector2<f64>) {
    let perp = |a: Vector2<f64>| Vector2::new(-a.y, a.x);
    let e = Vector2::new(q[0].cos(), q[0].sin());
    let rh = Rotation2::new(q[0] + q[1]) * link.first_moment;
    let jp = Matrix2::from_columns(&[perp(e) * l1, Vector2::zeros()]);
    let jphi = Vector2::new(1.0, 1.0);

    let cross = jp.transpose() * perp(rh) * jphi.transpose();
    let mass = link.mass * jp.transpose() * jp + cross + cross.transpose() + link.inertia * jphi * jphi.transpose();
    // ∂J_p/∂q₁ = -l₁ [e, 0]; ∂(R h)/∂q_i = perp(R h), so ∂perp(R h)/∂q_i = -R h.
    let djp1 = Matrix2::from_columns(&[-e * l1, Vector2::zeros()]);
    let d_mass = |i: usize| {
        let a = if i == 0 { djp1 } else { Matrix2::zeros() };
        let cross_jp = a.transpose() * perp(rh) * jphi.transpose();
        let cross_r = jp.transpose() * (-rh) * jphi.transpose();
        link.mass * (a.transpose() * jp + jp.transpose() * a) + cross_jp + cross_jp.transpose() + cross_r + cross_r.transpose()
    };
    let dm = [d_mass(0), d_mass(1)];
    let coriolis = Matrix2::from_fn(|k, j| (0..2).map(|i| 0.5 * (dm[i][(k, j)] + dm[j][(k, i)] - dm[k][(i, j)]) * v[i]).sum());
    // U = g (m p₂ + R h)_y
    let gravity = Vector2::from_fn(|i, _| GRAVITY * (link.mass * jp[(1, i)] + perp(rh).y));
    (mass, coriolis, gravity)
}

#[test]
fn arm_regressor_matches_energy_derived_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let arm = TwoLinkArm::default();
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let link = PlanarLink {
            mass: rng.random_range(0.1..5.0),
            first_moment: Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            inertia: rng.random_range(0.5..3.0),
        };
        let q = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let v = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let vr = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let vr_dot = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (m, c, g) = planar_payload_terms(arm.length1, &link, &q, &v);
        let expected = m * vr_dot + c * vr + g;
        let dv = |x: Vector2<f64>| DVector::from_column_slice(x.as_slice());
        let y = arm.link2_regressor(&dv(q), &dv(v), &dv(vr), &dv(vr_dot));
        let got = y * link.to_vector();
        worst = worst.max((got - dv(expected)).norm() / expected.norm().max(1.0));
    }
    assert!(worst <= 1e-9, "worst relative error {worst:.3e}");
}

/// `zᵀ(Ṁ - 2C)z` with `Ṁ` from a Richardson-extrapolated central difference
/// along `q̇`.
fn skew_defect(model: &dyn MechanicalModel, pi: &DVector<f64>, state: &GeneralizedState, z: &DVector<f64>) -> f64 {
    let terms = |s: &GeneralizedState| model.nominal_terms(s).unwrap().combined(&model.uncertain_terms(s, pi).unwrap());
    let qdot = model.position_rate(state);
    let mass_at = |h: f64| terms(&GeneralizedState::new(&state.q + &qdot * h, state.v.clone())).mass;
    let central = |h: f64| (mass_at(h) - mass_at(-h)) / (2.0 * h);
    let h = 1e-3;
    let m_dot = (central(h / 2.0) * 4.0 - central(h)) / 3.0;
    let c = terms(state).coriolis;
    z.dot(&((m_dot - c * 2.0) * z))
}

#[test]
fn arm_mass_rate_minus_twice_coriolis_is_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let arm = TwoLinkArm::default();
    for _ in 0..DRAWS {
        let pi = DVector::from_column_slice(&[rng.random_range(0.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)]);
        let state = GeneralizedState::new(
            DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)),
            DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)),
        );
        let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let d = skew_defect(&arm, &pi, &state, &z);
        assert!(d.abs() <= 1e-8, "zᵀ(Ṁ-2C)z = {d:.3e}");
    }
}

#[test]
fn rigid_body_mass_rate_minus_twice_coriolis_is_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..DRAWS {
        let (m, c, ic) = random_body(&mut rng);
        let (mn, cn, icn) = random_body(&mut rng);
        let body = FloatingBody::new(InertialParameters::rigid_payload(mn, cn, icn), Actuation::Wrench);
        let pi = parameter_vector(m, &c, &ic);
        let theta = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.3..1.3), rng.random_range(-3.0..3.0));
        let state = GeneralizedState::new(
            DVector::from_column_slice(&[0.0, 0.0, 0.5, theta.x, theta.y, theta.z]),
            DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0)),
        );
        let z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let d = skew_defect(&body, &pi, &state, &z);
        assert!(d.abs() <= 1e-8, "zᵀ(Ṁ-2C)z = {d:.3e}");
    }
}

/// Integrates the plant with RK4 alongside the actuation work `∫ vᵀ S τ dt`
/// and returns (energy change, work).
fn energy_and_work(plant: &PlantTruth, start: GeneralizedState, tau: &DVector<f64>, energy: impl Fn(&GeneralizedState) -> f64, duration: f64, dt: f64) -> (f64, f64) {
    let model = plant.model.clone();
    let n = model.dof();
    let rate = |x: &DVector<f64>| {
        let s = GeneralizedState::from_stacked(&x.rows(0, 2 * n).into_owned());
        let vdot = true_forward_dynamics(plant, &s, tau).unwrap();
        let power = s.v.dot(&(model.nominal_terms(&s).unwrap().selection * tau));
        let mut d = DVector::zeros(2 * n + 1);
        d.rows_mut(0, n).copy_from(&model.position_rate(&s));
        d.rows_mut(n, n).copy_from(&vdot);
        d[2 * n] = power;
        d
    };
    let mut x = DVector::zeros(2 * n + 1);
    x.rows_mut(0, 2 * n).copy_from(&start.stacked());
    for _ in 0..(duration / dt).round() as usize {
        let k1 = rate(&x);
        let k2 = rate(&(&x + &k1 * (dt / 2.0)));
        let k3 = rate(&(&x + &k2 * (dt / 2.0)));
        let k4 = rate(&(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    let end = GeneralizedState::from_stacked(&x.rows(0, 2 * n).into_owned());
    (energy(&end) - energy(&start), x[2 * n])
}

#[test]
fn arm_energy_changes_by_actuation_work() {
    let arm = Arc::new(TwoLinkArm::default());
    let payload = PlanarLink::point_mass(0.7, Vector2::new(1.0, 0.1));
    let plant = PlantTruth::new(arm.clone(), payload.to_vector(), DVector::zeros(2));
    let energy = |s: &GeneralizedState| {
        let terms = arm.nominal_terms(s).unwrap().combined(&arm.uncertain_terms(s, &payload.to_vector()).unwrap());
        let link2 = arm.link2.add(&payload);
        let rh1 = Rotation2::new(s.q[0]) * arm.link1.first_moment;
        let rh2 = Rotation2::new(s.q[0] + s.q[1]) * link2.first_moment;
        let potential = GRAVITY * (rh1.y + link2.mass * arm.length1 * s.q[0].sin() + rh2.y);
        0.5 * s.v.dot(&(terms.mass * &s.v)) + potential
    };
    let start = GeneralizedState::new(DVector::from_column_slice(&[0.3, -0.8]), DVector::from_column_slice(&[1.0, -2.0]));
    let tau = DVector::from_column_slice(&[4.0, -1.5]);
    let (de, work) = energy_and_work(&plant, start, &tau, energy, 1.0, 1e-3);
    assert!((de - work).abs() <= 1e-8 * work.abs().max(1.0), "ΔE {de} vs work {work}");
}

#[test]
fn floating_body_energy_changes_by_actuation_work() {
    let nominal = InertialParameters::centered(50.0, Matrix3::from_diagonal(&Vector3::new(1.5, 3.0, 3.5)));
    let payload = InertialParameters::rigid_payload(20.0, Vector3::new(0.3, -0.1, 0.05), Matrix3::identity() * 0.05);
    let body = Arc::new(FloatingBody::new(nominal, Actuation::Wrench));
    let plant = PlantTruth::new(body.clone(), DVector::from_column_slice(payload.to_vector().as_slice()), DVector::zeros(6));
    let total = nominal.plus(&payload);
    let energy = |s: &GeneralizedState| {
        let terms = body.nominal_terms(s).unwrap().combined(&body.uncertain_terms(s, &plant.payload).unwrap());
        let r = rotation_zyx(&Vector3::new(s.q[3], s.q[4], s.q[5]));
        let height = total.mass * s.q[2] + (r * total.first_moment).z;
        0.5 * s.v.dot(&(terms.mass * &s.v)) + GRAVITY * height
    };
    let start = GeneralizedState::new(
        DVector::from_column_slice(&[0.0, 0.0, 0.5, 0.1, -0.2, 0.3]),
        DVector::from_column_slice(&[0.2, -0.1, 0.3, 0.5, -0.4, 0.8]),
    );
    let tau = DVector::from_column_slice(&[10.0, -5.0, 600.0, 2.0, -3.0, 1.0]);
    let (de, work) = energy_and_work(&plant, start, &tau, energy, 0.5, 1e-3);
    assert!((de - work).abs() <= 1e-8 * work.abs().max(1.0), "ΔE {de} vs work {work}");
}

proptest! {
    #[test]
    fn rigid_payload_round_trips_and_validates(
        m in 0.01f64..50.0,
        c in prop::array::uniform3(-1.0f64..1.0),
        d in prop::array::uniform3(0.01f64..2.0),
    ) {
        let c = Vector3::from(c);
        let ic = Matrix3::from_diagonal(&Vector3::from(d));
        let p = InertialParameters::rigid_payload(m, c, ic);
        prop_assert!(p.validate().is_ok());
        prop_assert!((p.center_of_mass().unwrap() - c).amax() < 1e-12);
        prop_assert!((p.inertia_about_com().unwrap() - ic).amax() < 1e-9 * (1.0 + m));
        let i = p.rotational_inertia();
        prop_assert_eq!(i, i.transpose());
    }

    #[test]
    fn regressor_is_linear_in_parameters(
        a in prop::array::uniform10(-5.0f64..5.0),
        b in prop::array::uniform10(-5.0f64..5.0),
        k in -3.0f64..3.0,
        theta in prop::array::uniform3(-1.2f64..1.2),
    ) {
        let body = FloatingBody::new(InertialParameters::centered(1.0, Matrix3::identity()), Actuation::Wrench);
        let state = GeneralizedState::new(
            DVector::from_column_slice(&[0.0, 0.0, 0.0, theta[0], theta[1], theta[2]]),
            DVector::from_column_slice(&[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]),
        );
        let vr = DVector::from_element(6, 0.3);
        let vr_dot = DVector::from_element(6, -0.7);
        let (a, b) = (DVector::from_column_slice(&a), DVector::from_column_slice(&b));
        let f = |p: &DVector<f64>| body.uncertain_terms(&state, p).unwrap().inverse_dynamics(&vr_dot, &vr);
        let combined = f(&(&a + &b * k));
        prop_assert!((combined - (f(&a) + f(&b) * k)).amax() < 1e-9);
    }
}
