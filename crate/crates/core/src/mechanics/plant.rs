use std::sync::Arc;

use nalgebra::DVector;

use super::{check_dim, GeneralizedState, MechanicalModel, MechanicsError};

/// Ground truth of a simulated plant: the nominal model, the hidden payload
/// parameters and a constant external generalized force.
///
/// For the floating body the external force is `(world force, base torque)`,
/// which is exactly the generalized force conjugate to `(v_p, ω)`.
#[derive(Clone)]
pub struct PlantTruth {
    pub model: Arc<dyn MechanicalModel>,
    pub payload: DVector<f64>,
    pub external: DVector<f64>,
}

impl std::fmt::Debug for PlantTruth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantTruth")
            .field("payload", &self.payload.as_slice())
            .field("external", &self.external.as_slice())
            .finish()
    }
}

impl PlantTruth {
    pub fn new(model: Arc<dyn MechanicalModel>, payload: DVector<f64>, external: DVector<f64>) -> Self {
        Self {
            model,
            payload,
            external,
        }
    }

    /// Plant identical to its nominal model.
    pub fn exact(model: Arc<dyn MechanicalModel>) -> Self {
        let (p, n) = (model.param_dim(), model.dof());
        Self::new(model, DVector::zeros(p), DVector::zeros(n))
    }

    /// Mismatch generalized force `τ_u = Y_u(q, v, v̇) π_u - f_ext` for a given acceleration.
    pub fn mismatch_force(
        &self,
        state: &GeneralizedState,
        accel: &DVector<f64>,
    ) -> Result<DVector<f64>, MechanicsError> {
        let y = self.model.regressor_accel(state, accel)?;
        Ok(y * &self.payload - &self.external)
    }
}

/// Solve `(M_n + M_u) v̇ + (C_n + C_u) v + g_n + g_u = S τ + f_ext` for `v̇`.
pub fn true_forward_dynamics(
    plant: &PlantTruth,
    state: &GeneralizedState,
    tau: &DVector<f64>,
) -> Result<DVector<f64>, MechanicsError> {
    let model = plant.model.as_ref();
    check_dim("τ", model.input_dim(), tau.len())?;
    check_dim("external force", model.dof(), plant.external.len())?;
    let terms = model
        .nominal_terms(state)?
        .combined(&model.uncertain_terms(state, &plant.payload)?);
    let rhs = &terms.selection * tau + &plant.external - &terms.coriolis * &state.v - &terms.gravity;
    terms
        .mass
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(MechanicsError::SingularInertia)
}
