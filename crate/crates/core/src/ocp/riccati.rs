use nalgebra::{DMatrix, DVector};

use super::{finite_difference_jacobian, OcpError};
use crate::linalg::{asymmetry, min_symmetric_eigenvalue};

/// Quadratic terminal cost `φ(x) = ½ (x - x_ref)ᵀ P (x - x_ref)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalCost {
    pub p: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    /// Replace `x_ref` by the state reference at the final node of each horizon.
    pub track_reference: bool,
}

impl TerminalCost {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.x_ref;
        0.5 * e.dot(&(&self.p * &e))
    }

    pub fn is_valid(&self) -> bool {
        asymmetry(&self.p) <= 1e-9 * self.p.amax().max(1.0) && min_symmetric_eigenvalue(&self.p) >= -1e-9 * self.p.amax().max(1.0)
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Stabilizing solution of `P = AᵀPA - AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` by the
/// structured doubling algorithm.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, OcpError> {
    let n = a.nrows();
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| OcpError::Definition("R must be positive definite".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = q.clone();
    let mut converged = false;
    for _ in 0..100 {
        let w = (&eye + &gk * &hk).lu();
        let w_a = w.solve(&ak).ok_or(OcpError::RiccatiDiverged)?;
        let w_g = w.solve(&gk).ok_or(OcpError::RiccatiDiverged)?;
        let h_next = &hk + ak.transpose() * &hk * &w_a;
        let g_next = &gk + &ak * &w_g * ak.transpose();
        let a_next = &ak * &w_a;
        let change = (&h_next - &hk).amax() / h_next.amax().max(1.0);
        hk = (&h_next + h_next.transpose()) * 0.5;
        gk = (&g_next + g_next.transpose()) * 0.5;
        ak = a_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(OcpError::RiccatiDiverged);
        }
        if change < 1e-15 || ak.amax() < 1e-300 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OcpError::RiccatiDiverged);
    }
    let p = hk;
    let gain = (r + b.transpose() * &p * b)
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or(OcpError::RiccatiDiverged)?;
    let rho = spectral_radius(&(a - b * gain));
    if !(rho < 1.0) {
        return Err(OcpError::NotStabilizable(rho));
    }
    Ok(p)
}

/// `‖AᵀPA - P - AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q‖_max`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let bp = b.transpose() * p;
    let inner = (r + &bp * b).lu().solve(&(&bp * a)).expect("invertible R + BᵀPB");
    (a.transpose() * p * a - p - a.transpose() * p * b * inner + q).amax()
}

/// Jacobians of a discrete map `x⁺ = F(x, u)` by central differences.
pub fn linearize_discrete<F>(step: F, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>, OcpError>,
{
    let a = finite_difference_jacobian(x, 1e-6, |xp| step(xp, u))?;
    let b = finite_difference_jacobian(u, 1e-6, |up| step(x, up))?;
    Ok((a, b))
}

/// LQR value function of the RK4 discretization (interval `dt`) of `flow`
/// at the equilibrium `(x_eq, u_eq)`, with stage weights `Q·dt`, `R·dt`.
pub fn lqr_terminal_cost<F>(
    flow: F,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
    dt: f64,
) -> Result<TerminalCost, OcpError>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>, OcpError>,
{
    let residual = flow(x_eq, u_eq)?.amax();
    if residual > 1e-6 {
        return Err(OcpError::NotEquilibrium { residual });
    }
    let rk4 = |x: &DVector<f64>, u: &DVector<f64>| -> Result<DVector<f64>, OcpError> {
        let k1 = flow(x, u)?;
        let k2 = flow(&(x + &k1 * (0.5 * dt)), u)?;
        let k3 = flow(&(x + &k2 * (0.5 * dt)), u)?;
        let k4 = flow(&(x + &k3 * dt), u)?;
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
    };
    let (a, b) = linearize_discrete(rk4, x_eq, u_eq)?;
    let p = solve_dare(&a, &b, &(q * dt), &(r * dt))?;
    Ok(TerminalCost {
        p,
        x_ref: x_eq.clone(),
        track_reference: false,
    })
}

/// Nominal input `w` with `S w = S τ - Y_u π̂_u`, by least squares. Fails when
/// the adaptive term does not lie in the range of `S`.
pub fn certainty_equivalence_split(
    tau: &DVector<f64>,
    yu: &DMatrix<f64>,
    pi_hat: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<DVector<f64>, OcpError> {
    let rhs = s * tau - yu * pi_hat;
    let svd = s.clone().svd(true, true);
    let w = svd
        .solve(&rhs, 1e-12 * svd.singular_values.max().max(1e-300))
        .map_err(|e| OcpError::Definition(e.to_string()))?;
    let residual = (s * &w - &rhs).norm();
    if residual > 1e-9 * rhs.norm().max(1.0) {
        return Err(OcpError::Unmatched(residual));
    }
    Ok(w)
}
