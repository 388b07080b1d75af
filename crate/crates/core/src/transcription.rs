//! Multiple shooting transcription and the QP subproblem in increment form.
//!
//! The NLP variables are `w = (x_0, u_0, .., x_{N-1}, u_{N-1}, x_N)` with
//! equality constraints
//!
//! ```text
//! B(w) = [ x_0 - x_hat ;  phi_k(x_k, u_k) - x_{k+1}  (k = 0..N-1) ] = 0
//! ```
//!
//! and Lagrangian `L = sum h_k + lambda^T B + mu^T C`. The QP solved at each
//! iteration has the exact Lagrangian gradient as its linear term and the
//! possibly stale Jacobian blocks in its equality rows; its solution gives the
//! increments `(dw, dlambda, dmu)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::integrator::{integrate_with_adjoints, IntegratorConfig, IntegratorError};
use crate::models::ModelSpec;
use crate::qp::{QpError, QpSettings, QpSolution, QpStage, QpTerminal, StructuredQp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TranscriptionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("inequality multiplier {index} would become {value:.3e} < 0")]
    NegativeMultiplier { index: usize, value: f64 },
}

/// Slack allowed on the sign of updated inequality multipliers.
pub const MULTIPLIER_SIGN_TOLERANCE: f64 = 1e-8;

/// Optimal control problem data shared by every iteration.
#[derive(Debug, Clone)]
pub struct Ocp {
    pub model: ModelSpec,
    pub horizon: usize,
    pub integrator: IntegratorConfig,
}

impl Ocp {
    pub fn new(model: ModelSpec, horizon: usize, integrator: IntegratorConfig) -> Result<Self, TranscriptionError> {
        if horizon < 1 {
            return Err(TranscriptionError::Dimension("horizon must be at least 1".into()));
        }
        integrator.validate()?;
        Ok(Self { model, horizon, integrator })
    }

    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nu(&self) -> usize {
        self.model.nu()
    }

    /// Number of primal variables `n_w`.
    pub fn n_w(&self) -> usize {
        self.horizon * (self.nx() + self.nu()) + self.nx()
    }
}

/// Primal iterate: states `x_0 .. x_N` and controls `u_0 .. u_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn constant(x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self { x: vec![x.clone(); horizon + 1], u: vec![u.clone(); horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// `w_k = (x_k, u_k)`.
    pub fn node(&self, k: usize) -> DVector<f64> {
        stack(&self.x[k], &self.u[k])
    }

    /// Stacked `w`.
    pub fn flatten(&self) -> DVector<f64> {
        let parts = (0..self.horizon()).map(|k| self.node(k)).chain(std::iter::once(self.x[self.horizon()].clone()));
        concat(parts)
    }

    pub fn check(&self, ocp: &Ocp) -> Result<(), TranscriptionError> {
        let ok = self.u.len() == ocp.horizon
            && self.x.len() == ocp.horizon + 1
            && self.x.iter().all(|v| v.len() == ocp.nx())
            && self.u.iter().all(|v| v.len() == ocp.nu());
        if !ok {
            return Err(TranscriptionError::Dimension("trajectory does not match horizon or model".into()));
        }
        if self.x.iter().chain(self.u.iter()).any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(TranscriptionError::Dimension("trajectory has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Dual iterate. `lambda[0]` belongs to the initial embedding and
/// `lambda[k + 1]` to continuity across interval `k`; `mu[k]` to the path
/// constraint of stage `k` and `mu[N]` to the terminal constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub lambda: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
}

impl Multipliers {
    pub fn zeros(ocp: &Ocp) -> Self {
        let n = ocp.horizon;
        let mut mu: Vec<DVector<f64>> = (0..n).map(|k| DVector::zeros(ocp.model.n_stage(k))).collect();
        mu.push(DVector::zeros(ocp.model.n_terminal()));
        Self { lambda: vec![DVector::zeros(ocp.nx()); n + 1], mu }
    }
}

/// Tracking references per node.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl References {
    pub fn constant(x: &DVector<f64>, u: &DVector<f64>, horizon: usize) -> Self {
        Self { x: vec![x.clone(); horizon + 1], u: vec![u.clone(); horizon] }
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub(crate) fn concat(parts: impl IntoIterator<Item = DVector<f64>>) -> DVector<f64> {
    let parts: Vec<_> = parts.into_iter().collect();
    let len = parts.iter().map(|p| p.len()).sum();
    DVector::from_iterator(len, parts.iter().flat_map(|p| p.iter().copied()))
}

/// Constant Gauss-Newton Hessian blocks `(diag(Q, R), Q_N)`.
pub fn gauss_newton_hessian(model: &ModelSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_diagonal(&model.stage_weights), DMatrix::from_diagonal(&model.terminal_weights))
}

/// Per-interval quantities the QP assembly needs.
#[derive(Debug, Clone, Copy)]
pub struct NodeInput<'a> {
    /// `phi_k(x_k, u_k)` at the current iterate.
    pub phi: &'a DVector<f64>,
    /// Jacobian block used in the equality rows.
    pub jacobian: &'a DMatrix<f64>,
    /// `jacobian^T lambda_{k+1}` when the block is fresh, otherwise the exact
    /// adjoint product `lambda_{k+1}^T grad phi_k` from a reverse sweep.
    pub adjoint: &'a DVector<f64>,
}

/// QP subproblem in increment form together with the base multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct QpData {
    /// Standard-form QP whose multipliers are total (base plus increment).
    pub qp: StructuredQp,
    pub lambda: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    /// Lagrangian gradient with the exact adjoint products.
    pub gradient: DVector<f64>,
}

/// Primal-dual increments `(dw, dlambda, dmu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpStep {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    pub dlambda: Vec<DVector<f64>>,
    pub dmu: Vec<DVector<f64>>,
    pub active_set: Vec<usize>,
    pub qp_iterations: usize,
}

impl QpStep {
    pub fn zero(ocp: &Ocp) -> Self {
        let m = Multipliers::zeros(ocp);
        let t = Trajectory::constant(&DVector::zeros(ocp.nx()), &DVector::zeros(ocp.nu()), ocp.horizon);
        Self { dx: t.x, du: t.u, dlambda: m.lambda, dmu: m.mu, active_set: Vec::new(), qp_iterations: 0 }
    }

    /// `dw` as a trajectory-shaped increment.
    pub fn dw(&self) -> Trajectory {
        Trajectory { x: self.dx.clone(), u: self.du.clone() }
    }

    /// `(dw, dmu, dlambda)` stacked into one vector.
    pub fn stacked(&self) -> DVector<f64> {
        concat(
            std::iter::once(self.dw().flatten())
                .chain(self.dmu.iter().cloned())
                .chain(self.dlambda.iter().cloned()),
        )
    }

    pub fn norm(&self) -> f64 {
        self.stacked().norm()
    }
}

fn cost_gradient(model: &ModelSpec, traj: &Trajectory, refs: &References) -> (Vec<DVector<f64>>, DVector<f64>) {
    let n = traj.horizon();
    let stage = (0..n)
        .map(|k| (traj.node(k) - stack(&refs.x[k], &refs.u[k])).component_mul(&model.stage_weights))
        .collect();
    let terminal = (&traj.x[n] - &refs.x[n]).component_mul(&model.terminal_weights);
    (stage, terminal)
}

fn check_refs(ocp: &Ocp, refs: &References) -> Result<(), TranscriptionError> {
    let ok = refs.x.len() == ocp.horizon + 1
        && refs.u.len() == ocp.horizon
        && refs.x.iter().all(|v| v.len() == ocp.nx())
        && refs.u.iter().all(|v| v.len() == ocp.nu());
    if ok {
        Ok(())
    } else {
        Err(TranscriptionError::Dimension("references do not match horizon or model".into()))
    }
}

/// Assembles the QP subproblem at `(traj, mult)`.
pub fn build_qp(
    ocp: &Ocp,
    traj: &Trajectory,
    mult: &Multipliers,
    x_hat: &DVector<f64>,
    refs: &References,
    nodes: &[NodeInput<'_>],
) -> Result<QpData, TranscriptionError> {
    traj.check(ocp)?;
    check_refs(ocp, refs)?;
    let (n, nx, nu) = (ocp.horizon, ocp.nx(), ocp.nu());
    if nodes.len() != n || x_hat.len() != nx {
        return Err(TranscriptionError::Dimension("node inputs or measurement have wrong length".into()));
    }
    if mult.lambda.len() != n + 1 || mult.mu.len() != n + 1 {
        return Err(TranscriptionError::Dimension("multipliers do not match horizon".into()));
    }
    let model = &ocp.model;
    let (h_stage, h_terminal) = gauss_newton_hessian(model);
    let (cost_stage, cost_terminal) = cost_gradient(model, traj, refs);
    let mut stages = Vec::with_capacity(n);
    let mut gradient_parts = Vec::with_capacity(n + 1);
    for (k, node) in nodes.iter().enumerate() {
        if node.jacobian.shape() != (nx, nx + nu) || node.phi.len() != nx || node.adjoint.len() != nx + nu {
            return Err(TranscriptionError::Dimension(format!("node {k} inputs have wrong shape")));
        }
        let z = traj.node(k);
        let c_mat = model.stage_constraint(k).jacobian(&z);
        let c = model.stage_constraint(k).eval(&z);
        let lam_next = &mult.lambda[k + 1];
        // Standard-form gradient: the equality and inequality multiplier terms
        // of the Lagrangian gradient minus those the QP adds back itself.
        let g = &cost_stage[k] + (node.adjoint - node.jacobian.tr_mul(lam_next));
        let mut grad = &cost_stage[k] + node.adjoint + c_mat.tr_mul(&mult.mu[k]);
        {
            let mut gx = grad.rows_mut(0, nx);
            if k == 0 {
                gx += &mult.lambda[0];
            } else {
                gx -= &mult.lambda[k];
            }
        }
        gradient_parts.push(grad);
        stages.push(QpStage {
            h: h_stage.clone(),
            g,
            ab: node.jacobian.clone(),
            b: node.phi - &traj.x[k + 1],
            c_mat,
            c,
        });
    }
    let x_n = &traj.x[n];
    let tc_mat = model.terminal_constraint.jacobian(x_n);
    let tc = model.terminal_constraint.eval(x_n);
    let mut grad_n = &cost_terminal + tc_mat.tr_mul(&mult.mu[n]) - &mult.lambda[n];
    if n == 0 {
        grad_n += &mult.lambda[0];
    }
    gradient_parts.push(grad_n);
    let qp = StructuredQp {
        nx,
        nu,
        e0: &traj.x[0] - x_hat,
        stages,
        terminal: QpTerminal { h: h_terminal, g: cost_terminal, c_mat: tc_mat, c: tc },
    };
    Ok(QpData { qp, lambda: mult.lambda.clone(), mu: mult.mu.clone(), gradient: concat(gradient_parts) })
}

/// Solves the QP and converts total multipliers into increments.
pub fn solve_qp(data: &QpData, settings: &QpSettings) -> Result<(QpSolution, QpStep), TranscriptionError> {
    let sol = data.qp.solve(settings)?;
    let step = step_from_solution(data, &sol);
    Ok((sol, step))
}

pub fn step_from_solution(data: &QpData, sol: &QpSolution) -> QpStep {
    let qp = &data.qp;
    let (n, nx, nu) = (qp.horizon(), qp.nx, qp.nu);
    let nz = nx + nu;
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    for k in 0..n {
        dx.push(sol.x.rows(k * nz, nx).into_owned());
        du.push(sol.x.rows(k * nz + nx, nu).into_owned());
    }
    dx.push(sol.x.rows(n * nz, nx).into_owned());
    let dlambda = (0..=n).map(|k| sol.y.rows(k * nx, nx) - &data.lambda[k]).collect();
    let mut offset = 0;
    let dmu = data
        .mu
        .iter()
        .map(|mu| {
            let d = sol.z.rows(offset, mu.len()) - mu;
            offset += mu.len();
            d
        })
        .collect();
    QpStep { dx, du, dlambda, dmu, active_set: sol.active_set.clone(), qp_iterations: sol.iterations }
}

/// Full Newton-type update of primal and dual iterates.
pub fn apply_step(traj: &Trajectory, mult: &Multipliers, step: &QpStep) -> Result<(Trajectory, Multipliers), TranscriptionError> {
    let shapes_ok = step.dx.len() == traj.x.len()
        && step.du.len() == traj.u.len()
        && step.dlambda.len() == mult.lambda.len()
        && step.dmu.len() == mult.mu.len();
    if !shapes_ok {
        return Err(TranscriptionError::Dimension("step does not match iterate".into()));
    }
    let add = |a: &[DVector<f64>], b: &[DVector<f64>]| a.iter().zip(b).map(|(a, b)| a + b).collect::<Vec<_>>();
    let mu = add(&mult.mu, &step.dmu);
    let mut index = 0;
    for block in &mu {
        for &value in block.iter() {
            if value < -MULTIPLIER_SIGN_TOLERANCE {
                return Err(TranscriptionError::NegativeMultiplier { index, value });
            }
            index += 1;
        }
    }
    Ok((
        Trajectory { x: add(&traj.x, &step.dx), u: add(&traj.u, &step.du) },
        Multipliers { lambda: add(&mult.lambda, &step.dlambda), mu },
    ))
}

/// Continuity residuals `phi_k - x_{k+1}` and embedding residual, stacked as `B(w)`.
pub fn equality_residual(traj: &Trajectory, x_hat: &DVector<f64>, phi: &[DVector<f64>]) -> DVector<f64> {
    concat(std::iter::once(&traj.x[0] - x_hat).chain(phi.iter().enumerate().map(|(k, p)| p - &traj.x[k + 1])))
}

/// Norm of `(grad_w L, B(w))` with freshly computed sensitivities.
pub fn kkt_residual(
    ocp: &Ocp,
    traj: &Trajectory,
    mult: &Multipliers,
    x_hat: &DVector<f64>,
    refs: &References,
) -> Result<f64, TranscriptionError> {
    traj.check(ocp)?;
    let dynamics = ocp.model.dynamics.as_ref();
    let mut phi = Vec::with_capacity(ocp.horizon);
    let mut adjoint = Vec::with_capacity(ocp.horizon);
    for k in 0..ocp.horizon {
        let (p, mut rows) = integrate_with_adjoints(dynamics, &traj.x[k], &traj.u[k], &ocp.integrator, &[&mult.lambda[k + 1]])?;
        phi.push(p);
        adjoint.push(rows.pop().expect("one seed"));
    }
    Ok(kkt_residual_from(ocp, traj, mult, x_hat, refs, &phi, &adjoint)?)
}

/// [`kkt_residual`] from precomputed integrator outputs and exact adjoint rows.
pub fn kkt_residual_from(
    ocp: &Ocp,
    traj: &Trajectory,
    mult: &Multipliers,
    x_hat: &DVector<f64>,
    refs: &References,
    phi: &[DVector<f64>],
    adjoint: &[DVector<f64>],
) -> Result<f64, TranscriptionError> {
    let gradient = lagrangian_gradient(ocp, traj, mult, refs, adjoint)?;
    let eq = equality_residual(traj, x_hat, phi);
    Ok((gradient.norm_squared() + eq.norm_squared()).sqrt())
}

/// `grad_w L` given the adjoint rows `lambda_{k+1}^T grad phi_k`.
pub fn lagrangian_gradient(
    ocp: &Ocp,
    traj: &Trajectory,
    mult: &Multipliers,
    refs: &References,
    adjoint: &[DVector<f64>],
) -> Result<DVector<f64>, TranscriptionError> {
    check_refs(ocp, refs)?;
    let n = ocp.horizon;
    let nx = ocp.nx();
    if adjoint.len() != n {
        return Err(TranscriptionError::Dimension("one adjoint row per interval expected".into()));
    }
    let model = &ocp.model;
    let (cost_stage, cost_terminal) = cost_gradient(model, traj, refs);
    let mut parts = Vec::with_capacity(n + 1);
    for k in 0..n {
        let z = traj.node(k);
        let mut grad = &cost_stage[k] + &adjoint[k] + model.stage_constraint(k).jacobian(&z).tr_mul(&mult.mu[k]);
        let mut gx = grad.rows_mut(0, nx);
        if k == 0 {
            gx += &mult.lambda[0];
        } else {
            gx -= &mult.lambda[k];
        }
        parts.push(grad);
    }
    let x_n = &traj.x[n];
    parts.push(cost_terminal + model.terminal_constraint.jacobian(x_n).tr_mul(&mult.mu[n]) - &mult.lambda[n]);
    Ok(concat(parts))
}
