//! Composite-error geometry, the Lyapunov candidate, the CLF stage constraint
//! and the adaptive parameter update.
//!
//! Sign convention: `q̃ = q_d - q`, `ṽ = v_d - v`, `σ = ṽ + Λ q̃ = v_r - v`.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::linalg::{is_spd, min_symmetric_eigenvalue};
use crate::mechanics::rotation::{quaternion_from_euler, rotation_zyx};
use crate::mechanics::{GeneralizedState, MechanicalModel, MechanicsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClfError {
    #[error("quaternion norm {0} differs from one")]
    NonUnitQuaternion(f64),
    #[error("{what} is not symmetric positive definite (smallest eigenvalue {eigenvalue:.3e})")]
    NotPositiveDefinite { what: &'static str, eigenvalue: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
}

fn require_spd(what: &'static str, m: &DMatrix<f64>) -> Result<(), ClfError> {
    if is_spd(m) {
        Ok(())
    } else {
        Err(ClfError::NotPositiveDefinite {
            what,
            eigenvalue: min_symmetric_eigenvalue(m),
        })
    }
}

/// `Λ` and `K_D` of the sliding surface and of `W = ½ σᵀ K_D σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingSurfaceConfig {
    /// `n×n` gain multiplying the position error. For a floating base the
    /// diagonal blocks are `Λ_l` and `Λ_o`.
    pub lambda: DMatrix<f64>,
    pub kd: DMatrix<f64>,
}

impl SlidingSurfaceConfig {
    pub fn new(lambda: DMatrix<f64>, kd: DMatrix<f64>) -> Result<Self, ClfError> {
        require_spd("Λ", &lambda)?;
        require_spd("K_D", &kd)?;
        if lambda.nrows() != kd.nrows() {
            return Err(ClfError::Dimension {
                what: "K_D",
                expected: lambda.nrows(),
                got: kd.nrows(),
            });
        }
        Ok(Self { lambda, kd })
    }

    pub fn floating_base(
        lambda_linear: Matrix3<f64>,
        lambda_rotational: Matrix3<f64>,
        kd: DMatrix<f64>,
    ) -> Result<Self, ClfError> {
        let mut lambda = DMatrix::zeros(6, 6);
        lambda.view_mut((0, 0), (3, 3)).copy_from(&lambda_linear);
        lambda.view_mut((3, 3), (3, 3)).copy_from(&lambda_rotational);
        Self::new(lambda, kd)
    }

    pub fn lambda_linear(&self) -> Matrix3<f64> {
        self.lambda.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn lambda_rotational(&self) -> Matrix3<f64> {
        self.lambda.fixed_view::<3, 3>(3, 3).into_owned()
    }
}

/// Desired motion at one instant.
///
/// For joint-space systems `position`, `velocity` and `acceleration` are
/// `n`-vectors and `orientation` is `None`. For a floating base `position` is
/// the desired CoM position, `orientation` the desired attitude, and
/// `velocity`/`acceleration` stack the world-frame linear and world-frame
/// angular parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSample {
    pub position: DVector<f64>,
    pub orientation: Option<UnitQuaternion<f64>>,
    pub velocity: DVector<f64>,
    pub acceleration: DVector<f64>,
}

impl ReferenceSample {
    /// Constant pose of a floating base.
    pub fn floating_hold(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position: DVector::from_column_slice(position.as_slice()),
            orientation: Some(orientation),
            velocity: DVector::zeros(6),
            acceleration: DVector::zeros(6),
        }
    }

    pub fn joint_hold(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            position: q,
            orientation: None,
            velocity: DVector::zeros(n),
            acceleration: DVector::zeros(n),
        }
    }
}

/// Desired trajectory evaluable at any time.
pub trait ReferenceSignal: Send + Sync {
    fn sample(&self, t: f64) -> ReferenceSample;
}

impl ReferenceSignal for ReferenceSample {
    fn sample(&self, _t: f64) -> ReferenceSample {
        self.clone()
    }
}

/// `σ`, `v_r`, `v̇_r` and the attitude error at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingSurfaceState {
    pub sigma: DVector<f64>,
    pub vr: DVector<f64>,
    pub vr_dot: DVector<f64>,
    /// Quaternion attitude error (zero for joint-space systems).
    pub eo: Vector3<f64>,
}

/// `e_o = η ε_d - η_d ε - ε_d × ε`, the vector part of `Q_d ⊗ Q*`.
pub fn quaternion_error(actual: &Quaternion<f64>, desired: &Quaternion<f64>) -> Result<Vector3<f64>, ClfError> {
    for q in [actual, desired] {
        let n = q.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(ClfError::NonUnitQuaternion(n));
        }
    }
    Ok(quaternion_error_unchecked(actual, desired))
}

fn quaternion_error_unchecked(actual: &Quaternion<f64>, desired: &Quaternion<f64>) -> Vector3<f64> {
    let (eta, eps) = (actual.w, actual.imag());
    let (eta_d, eps_d) = (desired.w, desired.imag());
    eta * eps_d - eta_d * eps - eps_d.cross(&eps)
}

/// Time derivative of the attitude error for world-frame rates `w` (actual)
/// and `w_d` (desired): `ė_o = ½ η̃ (w_d - w) + ½ (w_d + w) × e_o`.
pub fn quaternion_error_rate(
    actual: &Quaternion<f64>,
    desired: &Quaternion<f64>,
    w: &Vector3<f64>,
    w_d: &Vector3<f64>,
) -> Vector3<f64> {
    let eo = quaternion_error_unchecked(actual, desired);
    let eta_err = desired.w * actual.w + desired.imag().dot(&actual.imag());
    0.5 * eta_err * (w_d - w) + 0.5 * (w_d + w).cross(&eo)
}

/// Sliding-surface quantities of `state` with respect to `reference` at time `t`.
pub fn compose_sliding_state(
    state: &GeneralizedState,
    reference: &dyn ReferenceSignal,
    config: &SlidingSurfaceConfig,
    t: f64,
) -> SlidingSurfaceState {
    compose_at(state, &reference.sample(t), config)
}

/// Sliding-surface quantities for one reference sample.
pub fn compose_at(state: &GeneralizedState, reference: &ReferenceSample, config: &SlidingSurfaceConfig) -> SlidingSurfaceState {
    match reference.orientation {
        None => compose_joint(state, reference, config),
        Some(qd) => compose_floating(state, reference, &qd, config),
    }
}

fn compose_joint(state: &GeneralizedState, reference: &ReferenceSample, config: &SlidingSurfaceConfig) -> SlidingSurfaceState {
    let lambda = &config.lambda;
    let q_err = &reference.position - &state.q;
    let vr = &reference.velocity + lambda * &q_err;
    let vr_dot = &reference.acceleration + lambda * (&reference.velocity - &state.v);
    SlidingSurfaceState {
        sigma: &vr - &state.v,
        vr,
        vr_dot,
        eo: Vector3::zeros(),
    }
}

fn compose_floating(
    state: &GeneralizedState,
    reference: &ReferenceSample,
    qd: &UnitQuaternion<f64>,
    config: &SlidingSurfaceConfig,
) -> SlidingSurfaceState {
    let q = Vector6::from_column_slice(state.q.as_slice());
    let v = Vector6::from_column_slice(state.v.as_slice());
    let s = floating_sliding(&q, &v, reference, qd, &config.lambda_linear(), &config.lambda_rotational());
    SlidingSurfaceState {
        sigma: DVector::from_column_slice(s.sigma.as_slice()),
        vr: DVector::from_column_slice(s.vr.as_slice()),
        vr_dot: DVector::from_column_slice(s.vr_dot.as_slice()),
        eo: s.eo,
    }
}

/// Fixed-size sliding-surface quantities of a floating base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FloatingSliding {
    pub sigma: Vector6<f64>,
    pub vr: Vector6<f64>,
    pub vr_dot: Vector6<f64>,
    pub eo: Vector3<f64>,
}

/// Floating-base sliding surface for `q = (p, θ)`, `v = (v_p, ω)`.
///
/// The linear block uses `v_r = v_pd + Λ_l p̃`. The rotational block maps the
/// world-frame desired rate and attitude error into the base frame,
/// `ω_r = Rᵀ w_d + Λ_o Rᵀ e_o`, and differentiates it exactly using the
/// analytic quaternion-error rate.
pub fn floating_sliding(
    q: &Vector6<f64>,
    v: &Vector6<f64>,
    reference: &ReferenceSample,
    qd: &UnitQuaternion<f64>,
    lam_l: &Matrix3<f64>,
    lam_o: &Matrix3<f64>,
) -> FloatingSliding {
    let p = q.fixed_rows::<3>(0).into_owned();
    let theta = q.fixed_rows::<3>(3).into_owned();
    let vp = v.fixed_rows::<3>(0).into_owned();
    let omega = v.fixed_rows::<3>(3).into_owned();
    let rd = &reference.velocity;
    let ad = &reference.acceleration;
    let p_d = Vector3::new(reference.position[0], reference.position[1], reference.position[2]);
    let vp_d = Vector3::new(rd[0], rd[1], rd[2]);
    let w_d = Vector3::new(rd[3], rd[4], rd[5]);
    let ap_d = Vector3::new(ad[0], ad[1], ad[2]);
    let wdot_d = Vector3::new(ad[3], ad[4], ad[5]);

    let vr_lin = vp_d + lam_l * (p_d - p);
    let vr_dot_lin = ap_d + lam_l * (vp_d - vp);

    let r = rotation_zyx(&theta);
    let rt = r.transpose();
    let quat = quaternion_from_euler(&theta);
    let eo = quaternion_error_unchecked(quat.quaternion(), qd.quaternion());
    let w = r * omega;
    let eo_dot = quaternion_error_rate(quat.quaternion(), qd.quaternion(), &w, &w_d);
    let sk = crate::linalg::skew(&omega);
    let eo_base = rt * eo;
    let wd_base = rt * w_d;
    let vr_ang = wd_base + lam_o * eo_base;
    // d/dt Rᵀ = -[ω]× Rᵀ
    let vr_dot_ang = rt * wdot_d - sk * wd_base + lam_o * (rt * eo_dot - sk * eo_base);

    let mut vr = Vector6::zeros();
    vr.fixed_rows_mut::<3>(0).copy_from(&vr_lin);
    vr.fixed_rows_mut::<3>(3).copy_from(&vr_ang);
    let mut vr_dot = Vector6::zeros();
    vr_dot.fixed_rows_mut::<3>(0).copy_from(&vr_dot_lin);
    vr_dot.fixed_rows_mut::<3>(3).copy_from(&vr_dot_ang);
    FloatingSliding {
        sigma: vr - v,
        vr,
        vr_dot,
        eo,
    }
}

/// `V = ½ σᵀ M σ + ½ π̃ᵀ Γ⁻¹ π̃`. Needs the true parameters, so it is a
/// simulation diagnostic only.
pub fn lyapunov_value(
    sliding: &SlidingSurfaceState,
    combined_mass: &DMatrix<f64>,
    pi_tilde: &DVector<f64>,
    gamma: &DMatrix<f64>,
) -> f64 {
    let s = &sliding.sigma;
    let kinetic = 0.5 * s.dot(&(combined_mass * s));
    if pi_tilde.is_empty() {
        return kinetic;
    }
    let scaled = gamma
        .clone()
        .cholesky()
        .map(|ch| ch.solve(pi_tilde))
        .unwrap_or_else(|| DVector::from_element(pi_tilde.len(), f64::INFINITY));
    kinetic + 0.5 * pi_tilde.dot(&scaled)
}

/// Pieces of `h_clf` that do not depend on `τ`.
#[derive(Clone, Debug)]
pub struct ClfTerms {
    pub sigma: DVector<f64>,
    /// `Y_n π_n + Y_u π̂_u`
    pub compensation: DVector<f64>,
    /// `½ σᵀ K_D σ`
    pub margin: f64,
}

impl ClfTerms {
    pub fn evaluate(
        model: &dyn MechanicalModel,
        state: &GeneralizedState,
        sliding: &SlidingSurfaceState,
        pi_hat: &DVector<f64>,
        config: &SlidingSurfaceConfig,
    ) -> Result<Self, ClfError> {
        let yn = model.nominal_product(state, &sliding.vr, &sliding.vr_dot)?;
        let mut compensation = yn;
        if pi_hat.iter().any(|&x| x != 0.0) {
            let yu = model.regressor_reference(state, &sliding.vr, &sliding.vr_dot)?;
            compensation += yu * pi_hat;
        }
        let margin = 0.5 * sliding.sigma.dot(&(&config.kd * &sliding.sigma));
        Ok(Self {
            sigma: sliding.sigma.clone(),
            compensation,
            margin,
        })
    }

    /// `h_clf` for the generalized actuation force `S τ`.
    pub fn value(&self, actuation_force: &DVector<f64>) -> f64 {
        self.sigma.dot(&(actuation_force - &self.compensation)) - self.margin
    }
}

/// `h_clf = -σᵀ[-S τ + Y_n π_n + Y_u π̂_u] - ½ σᵀ K_D σ`; the MPC imposes `h_clf ≥ 0`.
pub fn clf_constraint_value(
    sliding: &SlidingSurfaceState,
    state: &GeneralizedState,
    tau: &DVector<f64>,
    pi_hat: &DVector<f64>,
    model: &dyn MechanicalModel,
    config: &SlidingSurfaceConfig,
) -> Result<f64, ClfError> {
    let terms = ClfTerms::evaluate(model, state, sliding, pi_hat, config)?;
    let s = model.nominal_terms(state)?.selection;
    Ok(terms.value(&(s * tau)))
}

/// Parameter estimate `π̂_u` with gain `Γ`, an optional frozen mask and a
/// clamping box.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveEstimate {
    pub pi_hat: DVector<f64>,
    pub gamma: DMatrix<f64>,
    /// Entries held at their current value.
    pub frozen: Vec<bool>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Per-entry flag set when the last update hit the box.
    pub clamped: Vec<bool>,
}

impl AdaptiveEstimate {
    /// Estimate starting at `initial`, box `±bound_factor·scale` per entry.
    pub fn new(
        initial: DVector<f64>,
        gamma: DMatrix<f64>,
        scale: &DVector<f64>,
        bound_factor: f64,
    ) -> Result<Self, ClfError> {
        let p = initial.len();
        if gamma.nrows() != p || gamma.ncols() != p {
            return Err(ClfError::Dimension {
                what: "Γ",
                expected: p,
                got: gamma.nrows(),
            });
        }
        if p > 0 {
            require_spd("Γ", &gamma)?;
        }
        let bound = scale.abs() * bound_factor;
        Ok(Self {
            pi_hat: initial,
            gamma,
            frozen: vec![false; p],
            lower: -bound.clone(),
            upper: bound,
            clamped: vec![false; p],
        })
    }

    pub fn with_frozen(mut self, frozen: Vec<bool>) -> Self {
        assert_eq!(frozen.len(), self.pi_hat.len());
        self.frozen = frozen;
        self
    }

    pub fn dim(&self) -> usize {
        self.pi_hat.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }

    /// Forward-Euler step of `π̂̇ = Γ Y_uᵀ σ`, then projection onto the box.
    pub fn update(&mut self, sliding: &SlidingSurfaceState, yu: &DMatrix<f64>, dt: f64) {
        assert!(dt > 0.0, "update step must be positive");
        let mut rate = &self.gamma * (yu.transpose() * &sliding.sigma);
        for (i, frozen) in self.frozen.iter().enumerate() {
            if *frozen {
                rate[i] = 0.0;
            }
        }
        let next = &self.pi_hat + rate * dt;
        for i in 0..next.len() {
            let x = next[i].clamp(self.lower[i], self.upper[i]);
            self.clamped[i] = x != next[i];
            self.pi_hat[i] = x;
        }
    }
}

/// Functional form of [`AdaptiveEstimate::update`].
pub fn update_estimate(
    estimate: &AdaptiveEstimate,
    sliding: &SlidingSurfaceState,
    yu: &DMatrix<f64>,
    dt: f64,
) -> AdaptiveEstimate {
    let mut next = estimate.clone();
    next.update(sliding, yu, dt);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanics::TwoLinkArm;
    use std::f64::consts::PI;

    fn floating_config() -> SlidingSurfaceConfig {
        SlidingSurfaceConfig::floating_base(
            Matrix3::identity() * 5.0,
            Matrix3::identity() * 5.0,
            DMatrix::identity(6, 6) * 50.0,
        )
        .unwrap()
    }

    #[test]
    fn identity_error_is_zero() {
        let id = Quaternion::identity();
        assert_eq!(quaternion_error(&id, &id).unwrap(), Vector3::zeros());
    }

    #[test]
    fn rotation_about_axis_gives_negative_half_sine() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let phi = 0.8;
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), phi);
        let e = quaternion_error(q.quaternion(), &Quaternion::identity()).unwrap();
        assert!((e + (phi / 2.0).sin() * axis).norm() < 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let q = Quaternion::new(1.1, 0.0, 0.0, 0.0);
        assert!(matches!(
            quaternion_error(&q, &Quaternion::identity()),
            Err(ClfError::NonUnitQuaternion(_))
        ));
    }

    #[test]
    fn position_offset_sigma() {
        let reference = ReferenceSample::floating_hold(Vector3::new(0.1, 0.0, 0.5), UnitQuaternion::identity());
        let state = GeneralizedState::new(
            DVector::from_column_slice(&[0.0, 0.0, 0.5, 0.0, 0.0, 0.0]),
            DVector::zeros(6),
        );
        let s = compose_sliding_state(&state, &reference, &floating_config(), 0.0);
        assert!((s.sigma - DVector::from_column_slice(&[0.5, 0.0, 0.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn on_reference_sigma_vanishes() {
        let reference = ReferenceSample {
            position: DVector::from_column_slice(&[0.2, -0.1, 0.5]),
            orientation: Some(quaternion_from_euler(&Vector3::new(0.1, -0.2, 0.3))),
            velocity: DVector::from_column_slice(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.3]),
            acceleration: DVector::from_column_slice(&[0.0, 0.2, 0.0, 0.1, 0.0, 0.0]),
        };
        let theta = Vector3::new(0.1, -0.2, 0.3);
        let r = rotation_zyx(&theta);
        let wd = Vector3::new(0.0, 0.0, 0.3);
        let omega = r.transpose() * wd;
        let state = GeneralizedState::new(
            DVector::from_column_slice(&[0.2, -0.1, 0.5, theta.x, theta.y, theta.z]),
            DVector::from_column_slice(&[0.1, 0.0, 0.0, omega.x, omega.y, omega.z]),
        );
        let s = compose_at(&state, &reference, &floating_config());
        assert!(s.sigma.norm() < 1e-12);
        assert!(s.eo.norm() < 1e-12);
    }

    #[test]
    fn lyapunov_unit_case() {
        let sliding = SlidingSurfaceState {
            sigma: DVector::from_column_slice(&[1.0, 0.0]),
            vr: DVector::zeros(2),
            vr_dot: DVector::zeros(2),
            eo: Vector3::zeros(),
        };
        let v = lyapunov_value(&sliding, &DMatrix::identity(2, 2), &DVector::zeros(1), &DMatrix::identity(1, 1));
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn feedforward_only_input_violates_margin() {
        let arm = TwoLinkArm::default();
        let config = SlidingSurfaceConfig::new(DMatrix::identity(2, 2) * 5.0, DMatrix::identity(2, 2) * 10.0).unwrap();
        let state = GeneralizedState::new(DVector::from_column_slice(&[0.1, 0.2]), DVector::from_column_slice(&[0.3, -0.1]));
        let reference = ReferenceSample::joint_hold(DVector::from_column_slice(&[0.5, -0.3]));
        let sliding = compose_at(&state, &reference, &config);
        let pi_hat = DVector::from_column_slice(&[0.4, 0.2, 0.0, 0.1]);
        let terms = ClfTerms::evaluate(&arm, &state, &sliding, &pi_hat, &config).unwrap();
        let tau = terms.compensation.clone();
        let h = clf_constraint_value(&sliding, &state, &tau, &pi_hat, &arm, &config).unwrap();
        assert!((h + terms.margin).abs() < 1e-10);
        assert!(h < 0.0);
    }

    #[test]
    fn scalar_update_arithmetic() {
        let mut est = AdaptiveEstimate::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 5.0),
            &DVector::from_element(1, 1.0),
            10.0,
        )
        .unwrap();
        let sliding = SlidingSurfaceState {
            sigma: DVector::from_element(1, 1.0),
            vr: DVector::zeros(1),
            vr_dot: DVector::zeros(1),
            eo: Vector3::zeros(),
        };
        est.update(&sliding, &DMatrix::from_element(1, 1, 1.0), 0.01);
        assert!((est.pi_hat[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn clamp_is_flagged() {
        let mut est = AdaptiveEstimate::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1000.0),
            &DVector::from_element(1, 0.1),
            10.0,
        )
        .unwrap();
        let sliding = SlidingSurfaceState {
            sigma: DVector::from_element(1, 1.0),
            vr: DVector::zeros(1),
            vr_dot: DVector::zeros(1),
            eo: Vector3::zeros(),
        };
        est.update(&sliding, &DMatrix::from_element(1, 1, 1.0), 0.01);
        assert_eq!(est.pi_hat[0], 1.0);
        assert!(est.any_clamped());
    }

    #[test]
    fn half_turn_error_magnitude() {
        let q = UnitQuaternion::from_euler_angles(0.0, 0.0, PI);
        let e = quaternion_error(q.quaternion(), &Quaternion::identity()).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);
    }
}
