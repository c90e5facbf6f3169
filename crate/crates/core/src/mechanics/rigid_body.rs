//! Floating single rigid body with generalized coordinates `q = (p, θ)` (world
//! position of the body origin, ZYX Euler angles) and velocities
//! `v = (v_p, ω)` (world-frame linear velocity, base-frame angular velocity).

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use super::rotation::{check_pitch, euler_rate_map, rotation_zyx};
use super::{check_dim, DynamicsTerms, GeneralizedState, InertialParameters, MechanicalModel, MechanicsError, GRAVITY};
use crate::linalg::skew;

/// World gravity vector.
#[inline]
pub fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// Static-size `M`, `C`, `g` of a rigid body.
#[derive(Clone, Copy, Debug)]
pub struct RigidBodyTerms {
    pub mass: Matrix6<f64>,
    pub coriolis: Matrix6<f64>,
    pub gravity: Vector6<f64>,
}

impl RigidBodyTerms {
    /// Terms for inertial parameters `params` at orientation `r` and body rate `omega`.
    ///
    /// `M = [[m I, -R [h]×], [[h]× Rᵀ, I_o]]`,
    /// `C = [[0, -R [ω]× [h]×], [0, -[I_o ω]×]]`,
    /// `g = [m g₀ e_z, -h × Rᵀ g_w]`.
    pub fn new(params: &InertialParameters, r: &Matrix3<f64>, omega: &Vector3<f64>) -> Self {
        let h = skew(&params.first_moment);
        let inertia = params.rotational_inertia();
        let mut mass = Matrix6::zeros();
        mass.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() * params.mass));
        mass.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r * h));
        mass.fixed_view_mut::<3, 3>(3, 0).copy_from(&(h * r.transpose()));
        mass.fixed_view_mut::<3, 3>(3, 3).copy_from(&inertia);

        let mut coriolis = Matrix6::zeros();
        coriolis
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-r * skew(omega) * h));
        coriolis
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(-skew(&(inertia * omega))));

        let gw = gravity_world();
        let mut gravity = Vector6::zeros();
        gravity.fixed_rows_mut::<3>(0).copy_from(&(-params.mass * gw));
        gravity
            .fixed_rows_mut::<3>(3)
            .copy_from(&(-params.first_moment.cross(&(r.transpose() * gw))));
        Self {
            mass,
            coriolis,
            gravity,
        }
    }
}

/// Regressor `Y(q, v, v_r, v̇_r)` (6×10) of a rigid body with
/// `Y π = M(π) v̇_r + C(q, v; π) v_r + g(π)` for the inertial layout of
/// [`InertialParameters`].
pub fn rigid_body_regressor(
    r: &Matrix3<f64>,
    omega: &Vector3<f64>,
    vr: &Vector6<f64>,
    vr_dot: &Vector6<f64>,
) -> SMatrix<f64, 6, 10> {
    let vr_ang: Vector3<f64> = vr.fixed_rows::<3>(3).into();
    let ar_lin: Vector3<f64> = vr_dot.fixed_rows::<3>(0).into();
    let ar_ang: Vector3<f64> = vr_dot.fixed_rows::<3>(3).into();
    let lin_acc = ar_lin - gravity_world();
    let mut y = SMatrix::<f64, 6, 10>::zeros();
    // mass
    y.fixed_view_mut::<3, 1>(0, 0).copy_from(&lin_acc);
    // first moment
    y.fixed_view_mut::<3, 3>(0, 1)
        .copy_from(&(r * (skew(&ar_ang) + skew(omega) * skew(&vr_ang))));
    y.fixed_view_mut::<3, 3>(3, 1)
        .copy_from(&(-skew(&(r.transpose() * lin_acc))));
    // rotational inertia
    let l = inertia_product_matrix(&ar_ang) + skew(&vr_ang) * inertia_product_matrix(omega);
    y.fixed_view_mut::<3, 6>(3, 4).copy_from(&l);
    y
}

/// `L(w)` with `I w = L(w) · (xx, xy, xz, yy, yz, zz)`.
fn inertia_product_matrix(w: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    SMatrix::<f64, 3, 6>::from_row_slice(&[
        w.x, w.y, w.z, 0.0, 0.0, 0.0, //
        0.0, w.x, 0.0, w.y, w.z, 0.0, //
        0.0, 0.0, w.x, 0.0, w.y, w.z,
    ])
}

/// How the actuation `τ` enters the body.
#[derive(Clone, Debug, PartialEq)]
pub enum Actuation {
    /// `τ = (world force, base torque)` acting at the body origin; `S = I₆`.
    Wrench,
    /// World-fixed point contacts; `τ` stacks one base-frame force per foot.
    /// Inactive feet contribute zero columns.
    Contacts {
        feet: Vec<Vector3<f64>>,
        active: Vec<bool>,
    },
}

/// Floating single rigid body. The uncertain part is a rigid payload attached
/// to the body, parametrized by the ten inertial parameters.
#[derive(Clone, Debug)]
pub struct FloatingBody {
    pub nominal: InertialParameters,
    pub actuation: Actuation,
}

impl FloatingBody {
    pub fn new(nominal: InertialParameters, actuation: Actuation) -> Self {
        Self { nominal, actuation }
    }

    fn split(state: &GeneralizedState) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let q = &state.q;
        let v = &state.v;
        (
            Vector3::new(q[0], q[1], q[2]),
            Vector3::new(q[3], q[4], q[5]),
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    fn to_dynamic(t: &RigidBodyTerms, selection: DMatrix<f64>) -> DynamicsTerms {
        DynamicsTerms {
            mass: DMatrix::from_iterator(6, 6, t.mass.iter().copied()),
            coriolis: DMatrix::from_iterator(6, 6, t.coriolis.iter().copied()),
            gravity: DVector::from_iterator(6, t.gravity.iter().copied()),
            selection,
        }
    }

    pub fn selection_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        match &self.actuation {
            Actuation::Wrench => DMatrix::identity(6, 6),
            Actuation::Contacts { feet, active } => {
                let p = Vector3::new(q[0], q[1], q[2]);
                let r = rotation_zyx(&Vector3::new(q[3], q[4], q[5]));
                let mut s = DMatrix::zeros(6, 3 * feet.len());
                for (i, (foot, on)) in feet.iter().zip(active).enumerate() {
                    if !on {
                        continue;
                    }
                    let lever = r.transpose() * (foot - p);
                    s.view_mut((0, 3 * i), (3, 3)).copy_from(&r);
                    s.view_mut((3, 3 * i), (3, 3)).copy_from(&skew(&lever));
                }
                s
            }
        }
    }

    fn validate_state(&self, state: &GeneralizedState) -> Result<(), MechanicsError> {
        check_dim("q", 6, state.q.len())?;
        check_dim("v", 6, state.v.len())?;
        self.check_chart(&state.q)
    }
}

impl MechanicalModel for FloatingBody {
    fn dof(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        match &self.actuation {
            Actuation::Wrench => 6,
            Actuation::Contacts { feet, .. } => 3 * feet.len(),
        }
    }

    fn param_dim(&self) -> usize {
        InertialParameters::DIM
    }

    fn check_chart(&self, q: &DVector<f64>) -> Result<(), MechanicsError> {
        check_pitch(&Vector3::new(q[3], q[4], q[5]))
    }

    fn position_rate(&self, state: &GeneralizedState) -> DVector<f64> {
        let (_, theta, vp, omega) = Self::split(state);
        let rates = euler_rate_map(&theta) * omega;
        DVector::from_column_slice(&[vp.x, vp.y, vp.z, rates.x, rates.y, rates.z])
    }

    fn nominal_terms(&self, state: &GeneralizedState) -> Result<DynamicsTerms, MechanicsError> {
        self.validate_state(state)?;
        let (_, theta, _, omega) = Self::split(state);
        let terms = RigidBodyTerms::new(&self.nominal, &rotation_zyx(&theta), &omega);
        Ok(Self::to_dynamic(&terms, self.selection_matrix(&state.q)))
    }

    fn uncertain_terms(
        &self,
        state: &GeneralizedState,
        pi: &DVector<f64>,
    ) -> Result<DynamicsTerms, MechanicsError> {
        self.validate_state(state)?;
        check_dim("payload parameters", 10, pi.len())?;
        let (_, theta, _, omega) = Self::split(state);
        let payload = InertialParameters::from_slice(pi.as_slice());
        let terms = RigidBodyTerms::new(&payload, &rotation_zyx(&theta), &omega);
        Ok(Self::to_dynamic(&terms, self.selection_matrix(&state.q)))
    }

    fn regressor_reference(
        &self,
        state: &GeneralizedState,
        vr: &DVector<f64>,
        vr_dot: &DVector<f64>,
    ) -> Result<DMatrix<f64>, MechanicsError> {
        self.validate_state(state)?;
        check_dim("v_r", 6, vr.len())?;
        check_dim("v̇_r", 6, vr_dot.len())?;
        let (_, theta, _, omega) = Self::split(state);
        let y = rigid_body_regressor(
            &rotation_zyx(&theta),
            &omega,
            &Vector6::from_column_slice(vr.as_slice()),
            &Vector6::from_column_slice(vr_dot.as_slice()),
        );
        Ok(DMatrix::from_iterator(6, 10, y.iter().copied()))
    }
}
