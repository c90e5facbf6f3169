use nalgebra::{DMatrix, DVector};

use super::barrier::{relaxed_barrier, relaxed_barrier_curvature, relaxed_barrier_slope};
use super::{finite_difference_jacobian, NodeContext, OcpDefinition, OcpError};
use crate::parallel::{map_indexed, Execution};

/// States at `N` nodes and inputs on the `N - 1` intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Every node at `x`, every input at `u`.
    pub fn constant(t0: f64, dt: f64, nodes: usize, x: &DVector<f64>, u: &DVector<f64>) -> Self {
        Self {
            t0,
            dt,
            xs: vec![x.clone(); nodes],
            us: vec![u.clone(); nodes - 1],
        }
    }

    pub fn nodes(&self) -> usize {
        self.xs.len()
    }

    /// Decision vector `(x₀, u₀, x₁, u₁, …, x_{N-1})`.
    pub fn flatten(&self) -> DVector<f64> {
        let mut z = Vec::new();
        for k in 0..self.xs.len() {
            z.extend_from_slice(self.xs[k].as_slice());
            if k < self.us.len() {
                z.extend_from_slice(self.us[k].as_slice());
            }
        }
        DVector::from_vec(z)
    }

    pub fn unflatten(&self, z: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for k in 0..out.xs.len() {
            let nx = out.xs[k].len();
            out.xs[k] = z.rows(at, nx).into_owned();
            at += nx;
            if k < out.us.len() {
                let nu = out.us[k].len();
                out.us[k] = z.rows(at, nu).into_owned();
                at += nu;
            }
        }
        out
    }

    /// `self + α·step`.
    pub fn stepped(&self, dx: &[DVector<f64>], du: &[DVector<f64>], alpha: f64) -> Self {
        Self {
            t0: self.t0,
            dt: self.dt,
            xs: self.xs.iter().zip(dx).map(|(x, d)| x + d * alpha).collect(),
            us: self.us.iter().zip(du).map(|(u, d)| u + d * alpha).collect(),
        }
    }

    /// Values at absolute time `t`, linear interpolation between nodes and
    /// hold beyond the ends.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        interpolate(&self.xs, (t - self.t0) / self.dt)
    }

    pub fn input_at(&self, t: f64) -> DVector<f64> {
        interpolate(&self.us, (t - self.t0) / self.dt)
    }

    /// Same trajectory re-gridded to start at `t0`.
    pub fn shifted(&self, t0: f64) -> Self {
        let xs = (0..self.xs.len())
            .map(|k| self.state_at(t0 + k as f64 * self.dt))
            .collect();
        let us = (0..self.us.len())
            .map(|k| self.input_at(t0 + k as f64 * self.dt))
            .collect();
        Self {
            t0,
            dt: self.dt,
            xs,
            us,
        }
    }
}

fn interpolate(values: &[DVector<f64>], s: f64) -> DVector<f64> {
    let last = values.len() - 1;
    if s <= 0.0 {
        return values[0].clone();
    }
    if s >= last as f64 {
        return values[last].clone();
    }
    let i = s.floor() as usize;
    let w = s - i as f64;
    &values[i] * (1.0 - w) + &values[i + 1] * w
}

/// Linear-quadratic model of one interval.
#[derive(Clone, Debug)]
pub struct StageLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `F(x_k, u_k) - x_{k+1}`
    pub defect: DVector<f64>,
    pub hxx: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub hux: DMatrix<f64>,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
    /// Stage equalities `E_x δx + E_u δu + e = 0`: the state-input
    /// equalities of this node followed by the state equalities of the next
    /// node expressed through the linearized dynamics.
    pub eq_x: DMatrix<f64>,
    pub eq_u: DMatrix<f64>,
    pub eq_r: DVector<f64>,
    pub inequalities: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Linearization {
    pub stages: Vec<StageLinearization>,
    pub terminal_hxx: DMatrix<f64>,
    pub terminal_gx: DVector<f64>,
    /// `x̂₀ - x₀`
    pub initial_gap: DVector<f64>,
    /// State equalities at the first node, which no input can influence.
    pub initial_equalities: DVector<f64>,
}

/// Direct multiple-shooting transcription of an [`OcpDefinition`] for one
/// initial condition. Any adaptive estimate is part of the model's flow and
/// held constant over the horizon.
#[derive(Clone, Debug)]
pub struct MultipleShootingNlp {
    pub def: OcpDefinition,
    pub x0: DVector<f64>,
    pub t0: f64,
    pub execution: Execution,
    pub fd_step: f64,
}

impl MultipleShootingNlp {
    pub fn transcribe(def: &OcpDefinition, x0: &DVector<f64>, t0: f64) -> Result<Self, OcpError> {
        def.validate()?;
        let nx = def.model.state_dim();
        if x0.len() != nx {
            return Err(OcpError::Dimension {
                what: "x₀",
                expected: nx,
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(OcpError::Definition("x₀ is not finite".into()));
        }
        def.schedule.mode_at(t0)?;
        def.schedule.mode_at(t0 + def.horizon)?;
        Ok(Self {
            def: def.clone(),
            x0: x0.clone(),
            t0,
            execution: Execution::default(),
            fd_step: 1e-6,
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn dt(&self) -> f64 {
        self.def.interval()
    }

    pub fn nodes(&self) -> usize {
        self.def.nodes
    }

    pub fn context(&self, k: usize) -> Result<NodeContext, OcpError> {
        let time = self.t0 + k as f64 * self.dt();
        Ok(NodeContext {
            time,
            mode: self.def.schedule.mode_at(time)?,
        })
    }

    /// Trajectory holding `x₀` and the input reference.
    pub fn initial_guess(&self) -> Result<Trajectory, OcpError> {
        let n = self.nodes();
        let mut us = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            us.push(self.def.model.input_reference(&self.context(k)?));
        }
        Ok(Trajectory {
            t0: self.t0,
            dt: self.dt(),
            xs: vec![self.x0.clone(); n],
            us,
        })
    }

    /// One RK4 step over interval `k`; the mode is that of the interval start.
    pub fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        let ctx = self.context(k)?;
        let h = self.dt();
        let model = &self.def.model;
        let at = |dt: f64| NodeContext {
            time: ctx.time + dt,
            mode: ctx.mode,
        };
        let k1 = model.flow(&ctx, x, u)?;
        let k2 = model.flow(&at(0.5 * h), &(x + &k1 * (0.5 * h)), u)?;
        let k3 = model.flow(&at(0.5 * h), &(x + &k2 * (0.5 * h)), u)?;
        let k4 = model.flow(&at(h), &(x + &k3 * h), u)?;
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    fn flow_jacobians(
        &self,
        ctx: &NodeContext,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), OcpError> {
        let model = &self.def.model;
        let f = model.flow(ctx, x, u)?;
        let jx = finite_difference_jacobian(x, self.fd_step, |xp| model.flow(ctx, xp, u))?;
        let ju = finite_difference_jacobian(u, self.fd_step, |up| model.flow(ctx, x, up))?;
        Ok((f, jx, ju))
    }

    /// RK4 step with its exact chain-rule sensitivities built from the flow
    /// Jacobians at the four stages.
    pub fn step_with_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), OcpError> {
        let ctx = self.context(k)?;
        let h = self.dt();
        let nx = x.len();
        let eye = DMatrix::<f64>::identity(nx, nx);
        let at = |dt: f64| NodeContext {
            time: ctx.time + dt,
            mode: ctx.mode,
        };
        let (k1, j1x, j1u) = self.flow_jacobians(&ctx, x, u)?;
        let (dk1x, dk1u) = (j1x, j1u);

        let (k2, j2x, j2u) = self.flow_jacobians(&at(0.5 * h), &(x + &k1 * (0.5 * h)), u)?;
        let dk2x = &j2x * (&eye + &dk1x * (0.5 * h));
        let dk2u = &j2x * &dk1u * (0.5 * h) + j2u;

        let (k3, j3x, j3u) = self.flow_jacobians(&at(0.5 * h), &(x + &k2 * (0.5 * h)), u)?;
        let dk3x = &j3x * (&eye + &dk2x * (0.5 * h));
        let dk3u = &j3x * &dk2u * (0.5 * h) + j3u;

        let (k4, j4x, j4u) = self.flow_jacobians(&at(h), &(x + &k3 * h), u)?;
        let dk4x = &j4x * (&eye + &dk3x * h);
        let dk4u = &j4x * &dk3u * h + j4u;

        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let a = &eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
        let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
        Ok((next, a, b))
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, OcpError> {
        let ctx = self.context(k)?;
        let model = &self.def.model;
        let ex = x - model.state_reference(&ctx);
        let eu = u - model.input_reference(&ctx);
        let mut l = 0.5 * ex.dot(&(&self.def.q * &ex)) + 0.5 * eu.dot(&(&self.def.r * &eu));
        for z in model.inequalities(&ctx, x, u).iter() {
            l += relaxed_barrier(*z, &self.def.barrier);
        }
        Ok(self.dt() * l)
    }

    fn terminal_reference(&self) -> Result<Option<(DMatrix<f64>, DVector<f64>)>, OcpError> {
        match &self.def.terminal {
            None => Ok(None),
            Some(t) => {
                let x_ref = if t.track_reference {
                    self.def.model.state_reference(&self.context(self.nodes() - 1)?)
                } else {
                    t.x_ref.clone()
                };
                Ok(Some((t.p.clone(), x_ref)))
            }
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64, OcpError> {
        Ok(match self.terminal_reference()? {
            None => 0.0,
            Some((p, x_ref)) => {
                let e = x - x_ref;
                0.5 * e.dot(&(p * &e))
            }
        })
    }

    pub fn objective(&self, traj: &Trajectory) -> Result<f64, OcpError> {
        let n = self.nodes();
        let mut j = 0.0;
        for k in 0..n - 1 {
            j += self.stage_cost(k, &traj.xs[k], &traj.us[k])?;
        }
        Ok(j + self.terminal_cost(&traj.xs[n - 1])?)
    }

    /// Barrier inequality values per stage node.
    pub fn inequality_values(&self, traj: &Trajectory) -> Result<Vec<DVector<f64>>, OcpError> {
        (0..self.nodes() - 1)
            .map(|k| Ok(self.def.model.inequalities(&self.context(k)?, &traj.xs[k], &traj.us[k])))
            .collect()
    }

    /// All equality residuals stacked: initial condition, shooting defects,
    /// state equalities per node, state-input equalities per stage.
    pub fn constraints(&self, traj: &Trajectory) -> Result<DVector<f64>, OcpError> {
        let n = self.nodes();
        let model = &self.def.model;
        let mut c: Vec<f64> = (&traj.xs[0] - &self.x0).iter().copied().collect();
        let defects = map_indexed(self.execution, n - 1, |k| {
            self.step(k, &traj.xs[k], &traj.us[k]).map(|next| next - &traj.xs[k + 1])
        });
        for d in defects {
            c.extend(d?.iter());
        }
        for k in 0..n {
            c.extend(model.state_equalities(&self.context(k)?, &traj.xs[k]).iter());
        }
        for k in 0..n - 1 {
            c.extend(model.input_equalities(&self.context(k)?, &traj.xs[k], &traj.us[k]).iter());
        }
        Ok(DVector::from_vec(c))
    }

    /// Gradient of the objective in the flattened layout.
    pub fn objective_gradient(&self, traj: &Trajectory) -> Result<DVector<f64>, OcpError> {
        let lin = self.linearize(traj)?;
        let mut g = Vec::new();
        for stage in &lin.stages {
            g.extend(stage.gx.iter());
            g.extend(stage.gu.iter());
        }
        g.extend(lin.terminal_gx.iter());
        Ok(DVector::from_vec(g))
    }

    /// Jacobian of [`Self::constraints`] in the flattened layout.
    pub fn constraint_jacobian(&self, traj: &Trajectory) -> Result<DMatrix<f64>, OcpError> {
        let n = self.nodes();
        let nx = self.def.model.state_dim();
        let nu = self.def.model.input_dim();
        let model = &self.def.model;
        let col_x = |k: usize| k * (nx + nu);
        let col_u = |k: usize| k * (nx + nu) + nx;
        let nz = n * nx + (n - 1) * nu;
        let rows = self.constraints(traj)?.len();
        let mut jac = DMatrix::zeros(rows, nz);
        let mut row = 0;
        jac.view_mut((0, 0), (nx, nx)).fill_with_identity();
        row += nx;
        for k in 0..n - 1 {
            let (_, a, b) = self.step_with_jacobians(k, &traj.xs[k], &traj.us[k])?;
            jac.view_mut((row, col_x(k)), (nx, nx)).copy_from(&a);
            jac.view_mut((row, col_u(k)), (nx, nu)).copy_from(&b);
            for i in 0..nx {
                jac[(row + i, col_x(k + 1) + i)] = -1.0;
            }
            row += nx;
        }
        for k in 0..n {
            let ctx = self.context(k)?;
            let g = finite_difference_jacobian(&traj.xs[k], self.fd_step, |x| Ok(model.state_equalities(&ctx, x)))?;
            jac.view_mut((row, col_x(k)), g.shape()).copy_from(&g);
            row += g.nrows();
        }
        for k in 0..n - 1 {
            let ctx = self.context(k)?;
            let (x, u) = (&traj.xs[k], &traj.us[k]);
            let gx = finite_difference_jacobian(x, self.fd_step, |xp| Ok(model.input_equalities(&ctx, xp, u)))?;
            let gu = finite_difference_jacobian(u, self.fd_step, |up| Ok(model.input_equalities(&ctx, x, up)))?;
            jac.view_mut((row, col_x(k)), gx.shape()).copy_from(&gx);
            jac.view_mut((row, col_u(k)), gu.shape()).copy_from(&gu);
            row += gx.nrows();
        }
        Ok(jac)
    }

    fn linearize_stage(&self, k: usize, traj: &Trajectory) -> Result<StageLinearization, OcpError> {
        let model = &self.def.model;
        let ctx = self.context(k)?;
        let (x, u) = (&traj.xs[k], &traj.us[k]);
        let dt = self.dt();
        let (next, a, b) = self.step_with_jacobians(k, x, u)?;
        let defect = next - &traj.xs[k + 1];

        let ex = x - model.state_reference(&ctx);
        let eu = u - model.input_reference(&ctx);
        let mut hxx = &self.def.q * dt;
        let mut huu = &self.def.r * dt;
        let mut hux = DMatrix::zeros(u.len(), x.len());
        let mut gx = &self.def.q * ex * dt;
        let mut gu = &self.def.r * eu * dt;

        let ineq = model.inequalities(&ctx, x, u);
        if !ineq.is_empty() {
            let jx = finite_difference_jacobian(x, self.fd_step, |xp| Ok(model.inequalities(&ctx, xp, u)))?;
            let ju = finite_difference_jacobian(u, self.fd_step, |up| Ok(model.inequalities(&ctx, x, up)))?;
            for i in 0..ineq.len() {
                let slope = relaxed_barrier_slope(ineq[i], &self.def.barrier) * dt;
                let curv = relaxed_barrier_curvature(ineq[i], &self.def.barrier) * dt;
                let rx = jx.row(i).transpose();
                let ru = ju.row(i).transpose();
                gx += &rx * slope;
                gu += &ru * slope;
                hxx += &rx * rx.transpose() * curv;
                huu += &ru * ru.transpose() * curv;
                hux += &ru * rx.transpose() * curv;
            }
        }

        let g2 = model.input_equalities(&ctx, x, u);
        let next_ctx = self.context(k + 1)?;
        let g1 = model.state_equalities(&next_ctx, &traj.xs[k + 1]);
        let rows = g2.len() + g1.len();
        let mut eq_x = DMatrix::zeros(rows, x.len());
        let mut eq_u = DMatrix::zeros(rows, u.len());
        let mut eq_r = DVector::zeros(rows);
        if !g2.is_empty() {
            let cx = finite_difference_jacobian(x, self.fd_step, |xp| Ok(model.input_equalities(&ctx, xp, u)))?;
            let cu = finite_difference_jacobian(u, self.fd_step, |up| Ok(model.input_equalities(&ctx, x, up)))?;
            eq_x.view_mut((0, 0), cx.shape()).copy_from(&cx);
            eq_u.view_mut((0, 0), cu.shape()).copy_from(&cu);
            eq_r.rows_mut(0, g2.len()).copy_from(&g2);
        }
        if !g1.is_empty() {
            let xn = &traj.xs[k + 1];
            let g = finite_difference_jacobian(xn, self.fd_step, |xp| Ok(model.state_equalities(&next_ctx, xp)))?;
            let off = g2.len();
            eq_x.view_mut((off, 0), (g1.len(), x.len())).copy_from(&(&g * &a));
            eq_u.view_mut((off, 0), (g1.len(), u.len())).copy_from(&(&g * &b));
            eq_r.rows_mut(off, g1.len()).copy_from(&(&g * &defect + &g1));
        }

        Ok(StageLinearization {
            a,
            b,
            defect,
            hxx,
            huu,
            hux,
            gx,
            gu,
            eq_x,
            eq_u,
            eq_r,
            inequalities: ineq,
        })
    }

    /// Linear-quadratic approximation around `traj` (Gauss-Newton Hessian
    /// with exact barrier curvature).
    pub fn linearize(&self, traj: &Trajectory) -> Result<Linearization, OcpError> {
        let n = self.nodes();
        let stages = map_indexed(self.execution, n - 1, |k| self.linearize_stage(k, traj))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let nx = self.def.model.state_dim();
        let (terminal_hxx, terminal_gx) = match self.terminal_reference()? {
            None => (DMatrix::zeros(nx, nx), DVector::zeros(nx)),
            Some((p, x_ref)) => {
                let g = &p * (&traj.xs[n - 1] - x_ref);
                (p, g)
            }
        };
        Ok(Linearization {
            stages,
            terminal_hxx,
            terminal_gx,
            initial_gap: &self.x0 - &traj.xs[0],
            initial_equalities: self.def.model.state_equalities(&self.context(0)?, &traj.xs[0]),
        })
    }
}
