use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::transcription::{Linearization, MultipleShootingNlp, Trajectory};
use super::OcpError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqpSettings {
    pub max_iterations: usize,
    /// Tolerance on the step and the constraint violation (∞-norms).
    pub tolerance: f64,
    /// Diagonal shift threshold for near-singular reduced Hessians.
    pub levenberg: f64,
    pub max_backtracks: usize,
    pub armijo: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-6,
            levenberg: 1e-8,
            max_backtracks: 12,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub trajectory: Trajectory,
    /// Barrier inequality values per stage node.
    pub constraint_values: Vec<DVector<f64>>,
    pub cost: f64,
    /// Number of accepted non-trivial steps.
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    /// Largest equality residual (shooting defects included).
    pub max_violation: f64,
    pub line_search_failed: bool,
    pub solve_time: f64,
}

impl SolverResult {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.trajectory.us[0]
    }
}

struct Policy {
    /// Value-function gradients at the computed step, per node.
    costates: Vec<DVector<f64>>,
    dx: Vec<DVector<f64>>,
    du: Vec<DVector<f64>>,
}

/// Orthonormal basis of the null space of `d` and its pseudo-inverse.
fn null_space_split(d: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = d.shape();
    if m == 0 {
        return (DMatrix::identity(n, n), DMatrix::zeros(n, 0));
    }
    // pad to a square-or-tall matrix so the SVD returns a full right basis
    let rows = m.max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (m, n)).copy_from(d);
    let svd = padded.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1e-300);
    let mut null_cols = Vec::new();
    let mut pinv = DMatrix::zeros(n, m);
    for i in 0..n {
        let s = svd.singular_values[i];
        let v = vt.row(i).transpose();
        if s > tol {
            let ui = u.column(i).rows(0, m).into_owned();
            pinv += &v * ui.transpose() / s;
        } else {
            null_cols.push(v);
        }
    }
    let z = if null_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };
    (z, pinv)
}

fn regularized_cholesky(h: &DMatrix<f64>, threshold: f64) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let min_pivot = (0..n).map(|i| ch.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot * min_pivot > threshold {
            return ch;
        }
    }
    let mut shift = threshold * sym.diagonal().amax().max(1.0);
    loop {
        if let Some(ch) = (&sym + DMatrix::identity(n, n) * shift).cholesky() {
            return ch;
        }
        shift *= 10.0;
    }
}

fn riccati(lin: &Linearization, levenberg: f64) -> Policy {
    let n_stages = lin.stages.len();
    let mut s_mat = lin.terminal_hxx.clone();
    let mut s_vec = lin.terminal_gx.clone();
    let mut gains = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n_stages];
    let mut values = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n_stages + 1];
    values[n_stages] = (s_mat.clone(), s_vec.clone());
    for k in (0..n_stages).rev() {
        let st = &lin.stages[k];
        let sd = &s_mat * &st.defect + &s_vec;
        let sa = &s_mat * &st.a;
        let qxx = &st.hxx + st.a.transpose() * &sa;
        let quu = &st.huu + st.b.transpose() * &s_mat * &st.b;
        let qux = &st.hux + st.b.transpose() * &sa;
        let qx = &st.gx + st.a.transpose() * &sd;
        let qu = &st.gu + st.b.transpose() * &sd;

        let nu = st.b.ncols();
        let nx = st.a.ncols();
        let (z, pinv) = null_space_split(&st.eq_u);
        let (kc, kc0) = if st.eq_u.nrows() > 0 {
            (-&pinv * &st.eq_x, -&pinv * &st.eq_r)
        } else {
            (DMatrix::zeros(nu, nx), DVector::zeros(nu))
        };
        let (k_mat, k_vec) = if z.ncols() > 0 {
            let h = z.transpose() * &quu * &z;
            let ch = regularized_cholesky(&h, levenberg);
            let kw = -ch.solve(&(z.transpose() * (&qux + &quu * &kc)));
            let kw0 = -ch.solve(&(z.transpose() * (&qu + &quu * &kc0)));
            (&kc + &z * kw, &kc0 + &z * kw0)
        } else {
            (kc, kc0)
        };
        let kt = k_mat.transpose();
        let s_new = &qxx + &kt * &quu * &k_mat + &kt * &qux + qux.transpose() * &k_mat;
        s_vec = &qx + &kt * &qu + &kt * &quu * &k_vec + qux.transpose() * &k_vec;
        s_mat = (&s_new + s_new.transpose()) * 0.5;
        values[k] = (s_mat.clone(), s_vec.clone());
        gains[k] = (k_mat, k_vec);
    }

    let mut dx = Vec::with_capacity(n_stages + 1);
    let mut du = Vec::with_capacity(n_stages);
    let mut costates = Vec::with_capacity(n_stages + 1);
    let mut x = lin.initial_gap.clone();
    for k in 0..n_stages {
        let (km, kv) = &gains[k];
        let u = km * &x + kv;
        let st = &lin.stages[k];
        let next = &st.a * &x + &st.b * &u + &st.defect;
        costates.push(&values[k].0 * &x + &values[k].1);
        dx.push(x);
        du.push(u);
        x = next;
    }
    costates.push(&values[n_stages].0 * &x + &values[n_stages].1);
    dx.push(x);
    Policy {
        costates,
        dx,
        du,
    }
}

/// Projected Lagrangian gradient from an adjoint sweep at the current point.
fn stationarity(lin: &Linearization) -> f64 {
    let mut lambda = lin.terminal_gx.clone();
    let mut worst = 0.0_f64;
    for st in lin.stages.iter().rev() {
        let ru = &st.gu + st.b.transpose() * &lambda;
        let mut lx = &st.gx + st.a.transpose() * &lambda;
        let projected = if st.eq_u.nrows() > 0 {
            let (_, pinv) = null_space_split(&st.eq_u);
            let nu_mult = -pinv.transpose() * &ru;
            lx += st.eq_x.transpose() * &nu_mult;
            &ru + st.eq_u.transpose() * nu_mult
        } else {
            ru
        };
        worst = worst.max(projected.amax());
        lambda = lx;
    }
    worst
}

fn violation_l1(constraints: &DVector<f64>) -> f64 {
    constraints.iter().map(|v| v.abs()).sum()
}

struct Evaluation {
    cost: f64,
    constraints: DVector<f64>,
}

fn evaluate(nlp: &MultipleShootingNlp, traj: &Trajectory) -> Option<Evaluation> {
    let cost = nlp.objective(traj).ok()?;
    let constraints = nlp.constraints(traj).ok()?;
    if !cost.is_finite() || constraints.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Evaluation { cost, constraints })
}

fn directional_cost_derivative(lin: &Linearization, policy: &Policy) -> f64 {
    let mut d = 0.0;
    for (k, st) in lin.stages.iter().enumerate() {
        d += st.gx.dot(&policy.dx[k]) + st.gu.dot(&policy.du[k]);
    }
    d + lin.terminal_gx.dot(policy.dx.last().expect("terminal step"))
}

/// Gauss-Newton SQP on the multiple-shooting NLP.
///
/// Each iteration solves the equality-constrained LQ subproblem with a
/// Riccati recursion (stage equalities eliminated through their null space)
/// and globalizes with an Armijo line search on the ℓ₁ exact-penalty merit.
/// A warm start is re-gridded to the NLP's start time.
pub fn solve_sqp(
    nlp: &MultipleShootingNlp,
    warm_start: Option<&Trajectory>,
    settings: &SqpSettings,
) -> Result<SolverResult, OcpError> {
    assert!(settings.max_iterations >= 1, "at least one iteration is required");
    let started = Instant::now();
    let shifted = match warm_start {
        Some(w) if w.nodes() == nlp.nodes() && (w.dt - nlp.dt()).abs() < 1e-12 => {
            let t = w.shifted(nlp.t0);
            evaluate(nlp, &t).map(|e| (t, e))
        }
        _ => None,
    };
    // a warm start that left the model's domain falls back to the cold guess
    let (mut traj, mut current) = match shifted {
        Some(pair) => pair,
        None => {
            let t = nlp.initial_guess()?;
            let e = evaluate(nlp, &t).ok_or_else(|| OcpError::Model("initial guess is not evaluable".into()))?;
            (t, e)
        }
    };
    let mut penalty = 1.0_f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut line_search_failed = false;
    let mut kkt = f64::INFINITY;

    for _ in 0..settings.max_iterations {
        let lin = nlp.linearize(&traj)?;
        let violation_inf = current.constraints.amax();
        let policy = riccati(&lin, settings.levenberg);
        let step_inf = policy
            .dx
            .iter()
            .chain(policy.du.iter())
            .map(|v| v.amax())
            .fold(0.0, f64::max);
        kkt = stationarity(&lin).max(violation_inf);
        if step_inf <= settings.tolerance && violation_inf <= settings.tolerance {
            converged = true;
            break;
        }
        let lambda_max = policy.costates.iter().map(|l| l.amax()).fold(0.0, f64::max);
        penalty = penalty.max(2.0 * lambda_max + 1.0);

        let viol = violation_l1(&current.constraints);
        let merit0 = current.cost + penalty * viol;
        let slope = directional_cost_derivative(&lin, &policy) - penalty * viol;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let trial = traj.stepped(&policy.dx, &policy.du, alpha);
            if let Some(eval) = evaluate(nlp, &trial) {
                let merit = eval.cost + penalty * violation_l1(&eval.constraints);
                if merit <= merit0 + settings.armijo * alpha * slope.min(0.0) {
                    accepted = Some((trial, eval));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, eval)) => {
                traj = trial;
                current = eval;
                iterations += 1;
                if alpha * step_inf <= settings.tolerance && current.constraints.amax() <= settings.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                line_search_failed = true;
                break;
            }
        }
    }

    let max_violation = current.constraints.amax();
    Ok(SolverResult {
        constraint_values: nlp.inequality_values(&traj)?,
        cost: current.cost,
        iterations,
        converged: converged && !line_search_failed,
        kkt_residual: kkt,
        max_violation,
        line_search_failed,
        solve_time: started.elapsed().as_secs_f64(),
        trajectory: traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_single_row() {
        let d = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let (z, pinv) = null_space_split(&d);
        assert_eq!(z.ncols(), 2);
        assert!((&d * &z).amax() < 1e-12);
        assert!((&d * &pinv - DMatrix::identity(1, 1)).amax() < 1e-12);
    }

    #[test]
    fn null_space_of_rank_deficient_rows() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let (z, _) = null_space_split(&d);
        assert_eq!(z.ncols(), 2);
        assert!((&d * &z).amax() < 1e-12);
    }
}
