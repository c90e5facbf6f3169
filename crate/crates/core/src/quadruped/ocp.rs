//! Quadruped prediction model for the multiple-shooting OCP.

use std::sync::Arc;

use nalgebra::{DVector, Matrix3, Matrix6, SVector, Vector3, Vector6};

use super::{
    adaptive_generalized_force, contact_wrench, friction_cone_constraints, true_flow, weight_distribution_reference,
    AdaptiveWrenchParams, ContactSchedule, NominalBody, QuadrupedInput, QuadrupedState, ADAPTIVE_DIM, INPUT_DIM, STATE_DIM,
};
use crate::clf::{floating_sliding, FloatingSliding, ReferenceSample, ReferenceSignal};
use crate::mechanics::rotation::{euler_from_rotation, rotation_zyx};
use crate::ocp::{NodeContext, OcpError, OcpModel};

/// Dynamics used inside the horizon.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionModel {
    /// Nominal single rigid body.
    Nominal,
    /// Nominal body with `-Y_u(q, v, v_r, v̇_r) π̂` added as a generalized force.
    Adaptive,
    /// Body with the true payload and wrench.
    Perfect(AdaptiveWrenchParams),
    /// Nominal body plus an estimated external generalized force.
    Compensated(Vector6<f64>),
}

/// Sliding-surface gains of the CLF stage constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClfSettings {
    pub lambda_linear: Matrix3<f64>,
    pub lambda_rotational: Matrix3<f64>,
    pub kd: Matrix6<f64>,
}

pub struct QuadrupedOcpModel {
    pub body: NominalBody,
    pub schedule: Arc<ContactSchedule>,
    pub reference: Arc<dyn ReferenceSignal>,
    pub prediction: PredictionModel,
    /// Estimate used by the adaptive flow and by `h_clf`.
    pub pi_hat: SVector<f64, ADAPTIVE_DIM>,
    pub clf: Option<ClfSettings>,
    pub friction: f64,
    pub cone_smoothing: f64,
    /// Multiplies the friction-cone values before the barrier; a larger scale
    /// acts like a smaller relaxation threshold for the contact constraints.
    pub cone_scale: f64,
    /// Multiplies `h_clf` before the barrier.
    pub clf_scale: f64,
    /// Sliding gains used to form `v_r` in the adaptive flow when no CLF is imposed.
    pub sliding_gains: (Matrix3<f64>, Matrix3<f64>),
}

impl QuadrupedOcpModel {
    fn sample(&self, t: f64) -> ReferenceSample {
        self.reference.sample(t)
    }

    fn desired_attitude(sample: &ReferenceSample) -> nalgebra::UnitQuaternion<f64> {
        sample.orientation.unwrap_or_else(nalgebra::UnitQuaternion::identity)
    }

    fn sliding(&self, state: &QuadrupedState, sample: &ReferenceSample) -> FloatingSliding {
        let (ll, lo) = match &self.clf {
            Some(c) => (c.lambda_linear, c.lambda_rotational),
            None => self.sliding_gains,
        };
        floating_sliding(&state.q(), &state.v(), sample, &Self::desired_attitude(sample), &ll, &lo)
    }

    /// Reference state `(p_d, θ_d, v_d, R_dᵀ w_d)`.
    pub fn reference_state(sample: &ReferenceSample) -> QuadrupedState {
        let rd = Self::desired_attitude(sample).to_rotation_matrix().into_inner();
        let theta = euler_from_rotation(&rd);
        let p = &sample.position;
        let v = &sample.velocity;
        let w = rd.transpose() * Vector3::new(v[3], v[4], v[5]);
        QuadrupedState {
            p: Vector3::new(p[0], p[1], p[2]),
            theta,
            vp: Vector3::new(v[0], v[1], v[2]),
            omega: w,
        }
    }

    /// Predicted model-mismatch force (world frame) at the reference state.
    fn reference_compensation(&self, sample: &ReferenceSample) -> Vector3<f64> {
        let state = Self::reference_state(sample);
        let sliding = self.sliding(&state, sample);
        let g = match &self.prediction {
            PredictionModel::Nominal => Vector6::zeros(),
            PredictionModel::Adaptive => adaptive_generalized_force(&state, &sliding.vr, &sliding.vr_dot, &self.pi_hat),
            PredictionModel::Perfect(truth) => {
                adaptive_generalized_force(&state, &sliding.vr, &sliding.vr_dot, &truth.to_vector())
            }
            PredictionModel::Compensated(w) => -w,
        };
        g.fixed_rows::<3>(0).into_owned()
    }

    /// Predicted base acceleration for state `x` and input `u` in mode `mode` at time `t`.
    pub fn predict(&self, t: f64, mode: usize, state: &QuadrupedState, input: &QuadrupedInput) -> Result<SVector<f64, STATE_DIM>, OcpError> {
        state.check_chart().map_err(|e| OcpError::Model(e.to_string()))?;
        let m = &self.schedule.modes[mode];
        let wrench = contact_wrench(state, input, m);
        let accel = match &self.prediction {
            PredictionModel::Nominal => self.body.forward(state, &wrench),
            PredictionModel::Adaptive => {
                let sliding = self.sliding(state, &self.sample(t));
                let load = adaptive_generalized_force(state, &sliding.vr, &sliding.vr_dot, &self.pi_hat);
                self.body.forward(state, &(wrench - load))
            }
            PredictionModel::Perfect(truth) => {
                return true_flow(state, &wrench, &self.body, truth).map_err(|e| OcpError::Model(e.to_string()));
            }
            PredictionModel::Compensated(w) => self.body.forward(state, &(wrench + w)),
        };
        let mut dx = SVector::<f64, STATE_DIM>::zeros();
        dx.fixed_rows_mut::<6>(0).copy_from(&state.position_rate());
        dx.fixed_rows_mut::<6>(6).copy_from(&accel);
        Ok(dx)
    }

    /// `h_clf` at time `t` for state `x` and input `u`.
    pub fn clf_value(&self, settings: &ClfSettings, t: f64, mode: usize, state: &QuadrupedState, input: &QuadrupedInput) -> f64 {
        let sample = self.sample(t);
        let sliding = floating_sliding(
            &state.q(),
            &state.v(),
            &sample,
            &Self::desired_attitude(&sample),
            &settings.lambda_linear,
            &settings.lambda_rotational,
        );
        let wrench = contact_wrench(state, input, &self.schedule.modes[mode]);
        let compensation = self.body.inverse(state, &sliding.vr, &sliding.vr_dot)
            + adaptive_generalized_force(state, &sliding.vr, &sliding.vr_dot, &self.pi_hat);
        let s = sliding.sigma;
        s.dot(&(wrench - compensation)) - 0.5 * s.dot(&(settings.kd * s))
    }
}

impl OcpModel for QuadrupedOcpModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        INPUT_DIM
    }

    fn flow(&self, ctx: &NodeContext, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        let dx = self.predict(
            ctx.time,
            ctx.mode,
            &QuadrupedState::from_slice(x.as_slice()),
            &QuadrupedInput::from_slice(u.as_slice()),
        )?;
        Ok(DVector::from_column_slice(dx.as_slice()))
    }

    fn state_reference(&self, ctx: &NodeContext) -> DVector<f64> {
        Self::reference_state(&self.sample(ctx.time)).to_dvector()
    }

    fn input_reference(&self, ctx: &NodeContext) -> DVector<f64> {
        let sample = self.sample(ctx.time);
        let a = &sample.acceleration;
        let rd = Self::desired_attitude(&sample).to_rotation_matrix().into_inner();
        weight_distribution_reference(
            &self.schedule.modes[ctx.mode],
            self.body.mass,
            &Vector3::new(a[0], a[1], a[2]),
            &rd,
            &self.reference_compensation(&sample),
        )
        .map(|u| u.to_dvector())
        .unwrap_or_else(|_| DVector::zeros(INPUT_DIM))
    }

    fn input_equalities(&self, ctx: &NodeContext, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let m = &self.schedule.modes[ctx.mode];
        let swing: Vec<f64> = (0..super::FEET)
            .filter(|&i| !m.contact[i])
            .flat_map(|i| [u[3 * i], u[3 * i + 1], u[3 * i + 2]])
            .collect();
        DVector::from_vec(swing)
    }

    fn inequalities(&self, ctx: &NodeContext, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let state = QuadrupedState::from_slice(x.as_slice());
        let input = QuadrupedInput::from_slice(u.as_slice());
        let rotation = rotation_zyx(&state.theta);
        let mut h = friction_cone_constraints(&input, &self.schedule.modes[ctx.mode], self.friction, &rotation, self.cone_smoothing);
        h.iter_mut().for_each(|v| *v *= self.cone_scale);
        if let Some(settings) = &self.clf {
            h.push(self.clf_scale * self.clf_value(settings, ctx.time, ctx.mode, &state, &input));
        }
        DVector::from_vec(h)
    }
}
