//! Convex QP solver: primal-dual interior point (Mehrotra predictor-corrector).
//!
//! Problems have the form
//!
//! ```text
//! min 1/2 x^T H x + g^T x   s.t.   A x + b = 0,   C x + c <= 0
//! ```
//!
//! Each Newton system is reduced to `[H + C^T (Z/S) C, A^T; A, 0]` and solved
//! either by a Riccati recursion over the stagewise structure of a multiple
//! shooting QP ([`StructuredQp`]) or by a dense LU factorization ([`DenseQp`]).

use nalgebra::{DMatrix, DVector, linalg::Cholesky, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP appears infeasible (primal residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("interior point did not converge in {iterations} iterations (KKT residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64, best: Box<QpSolution> },
    #[error("singular KKT system")]
    Singular,
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite QP data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    /// Bound on each KKT residual component and on every complementarity
    /// product (infinity norms).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

/// Multipliers above this, or slacks below it, mark a row as active.
pub const ACTIVE_THRESHOLD: f64 = 1e-6;
/// Returned multipliers below this are set to zero.
pub const MULTIPLIER_FLOOR: f64 = 1e-10;
/// Largest `z / s` weight for which Newton directions are used unrefined.
const REFINEMENT_WEIGHT: f64 = 1e6;
/// Added to a Hessian block whose smallest eigenvalue falls below the same value.
pub const HESSIAN_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers, nonnegative.
    pub z: DVector<f64>,
    /// Inequality slacks `-(C x + c)` at the solution.
    pub slack: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// KKT residual at the returned point (see [`QpSettings::tol`]).
    pub kkt_residual: f64,
}

/// Operations the interior point needs from a problem representation.
trait KktOps {
    fn n(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_in(&self) -> usize;
    fn g(&self) -> DVector<f64>;
    fn b(&self) -> DVector<f64>;
    fn c(&self) -> DVector<f64>;
    fn mul_h(&self, x: &DVector<f64>) -> DVector<f64>;
    fn mul_a(&self, x: &DVector<f64>) -> DVector<f64>;
    fn mul_at(&self, y: &DVector<f64>) -> DVector<f64>;
    fn mul_c(&self, x: &DVector<f64>) -> DVector<f64>;
    fn mul_ct(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Factor the reduced system for inequality weights `w = z / s`.
    fn factor(&self, w: &DVector<f64>) -> Result<Box<dyn ReducedSolve + '_>, QpError>;
}

trait ReducedSolve {
    /// Solves `[Ht A^T; A 0] (dx, dy) = (-g, -b)`.
    fn solve(&self, g: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

// ---------------------------------------------------------------------------
// Dense problems
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl DenseQp {
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.g.len();
        let ok = self.h.shape() == (n, n)
            && self.a.ncols() == n
            && self.a.nrows() == self.b.len()
            && self.c_mat.ncols() == n
            && self.c_mat.nrows() == self.c.len();
        if !ok {
            return Err(QpError::Dimension("dense QP blocks are inconsistent".into()));
        }
        let all = [self.h.as_slice(), self.g.as_slice(), self.a.as_slice(), self.b.as_slice(), self.c_mat.as_slice(), self.c.as_slice()];
        if all.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution, QpError> {
        self.validate()?;
        let mut reg = self.clone();
        regularize(&mut reg.h);
        with_polish(interior_point(&reg, settings), || reg, settings.tol)
    }
}

struct DenseFactor {
    lu: nalgebra::linalg::LU<f64, Dyn, Dyn>,
    n: usize,
}

impl ReducedSolve for DenseFactor {
    fn solve(&self, g: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let rhs = DVector::from_iterator(g.len() + b.len(), g.iter().chain(b.iter()).map(|v| -v));
        let sol = self.lu.solve(&rhs).expect("checked invertible at factorization");
        (sol.rows(0, self.n).into_owned(), sol.rows(self.n, b.len()).into_owned())
    }
}

impl KktOps for DenseQp {
    fn n(&self) -> usize {
        self.g.len()
    }
    fn m_eq(&self) -> usize {
        self.b.len()
    }
    fn m_in(&self) -> usize {
        self.c.len()
    }
    fn g(&self) -> DVector<f64> {
        self.g.clone()
    }
    fn b(&self) -> DVector<f64> {
        self.b.clone()
    }
    fn c(&self) -> DVector<f64> {
        self.c.clone()
    }
    fn mul_h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn mul_a(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn mul_at(&self, y: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(y)
    }
    fn mul_c(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c_mat * x
    }
    fn mul_ct(&self, z: &DVector<f64>) -> DVector<f64> {
        self.c_mat.tr_mul(z)
    }
    fn factor(&self, w: &DVector<f64>) -> Result<Box<dyn ReducedSolve + '_>, QpError> {
        let (n, m) = (self.n(), self.m_eq());
        let mut k = DMatrix::zeros(n + m, n + m);
        let ht = add_weighted_gram(&self.h, &self.c_mat, w.rows(0, w.len()));
        k.view_mut((0, 0), (n, n)).copy_from(&ht);
        k.view_mut((0, n), (n, m)).copy_from(&self.a.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(&self.a);
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(QpError::Singular);
        }
        Ok(Box::new(DenseFactor { lu, n }))
    }
}

// ---------------------------------------------------------------------------
// Stagewise problems
// ---------------------------------------------------------------------------

/// One shooting stage of a [`StructuredQp`]. Variables are `d_k = (dx_k, du_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpStage {
    /// `(nx + nu)` square Hessian block.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Dynamics Jacobian `[A_k | B_k]`, `nx x (nx + nu)`.
    pub ab: DMatrix<f64>,
    /// Continuity residual: `dx_{k+1} = A_k dx_k + B_k du_k + b_k`.
    pub b: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpTerminal {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c_mat: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Multiple shooting QP. Equality rows are the initial embedding
/// `dx_0 + e_0 = 0` followed by one continuity block per stage
/// `A_k dx_k + B_k du_k - dx_{k+1} + b_k = 0`.
///
/// Flattened layouts: `x = (d_0, .., d_{N-1}, dx_N)`, equality multipliers
/// `(nu_0, .., nu_N)`, inequality rows stage by stage then terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredQp {
    pub nx: usize,
    pub nu: usize,
    pub e0: DVector<f64>,
    pub stages: Vec<QpStage>,
    pub terminal: QpTerminal,
}

impl StructuredQp {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn n_vars(&self) -> usize {
        self.stages.len() * (self.nx + self.nu) + self.nx
    }

    pub fn n_eq(&self) -> usize {
        (self.stages.len() + 1) * self.nx
    }

    pub fn n_ineq(&self) -> usize {
        self.stages.iter().map(|s| s.c.len()).sum::<usize>() + self.terminal.c.len()
    }

    fn nz(&self) -> usize {
        self.nx + self.nu
    }

    /// Start of each stage's inequality rows (plus the terminal start last).
    fn ineq_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        let mut acc = 0;
        for s in &self.stages {
            out.push(acc);
            acc += s.c.len();
        }
        out.push(acc);
        out
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let (nx, nz) = (self.nx, self.nz());
        let dim = |msg: String| Err(QpError::Dimension(msg));
        if self.e0.len() != nx {
            return dim(format!("embedding residual has length {}, expected {nx}", self.e0.len()));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.h.shape() != (nz, nz) || s.g.len() != nz || s.ab.shape() != (nx, nz) || s.b.len() != nx {
                return dim(format!("stage {k} blocks have wrong shape"));
            }
            if s.c_mat.shape() != (s.c.len(), nz) {
                return dim(format!("stage {k} inequality block has wrong shape"));
            }
        }
        let t = &self.terminal;
        if t.h.shape() != (nx, nx) || t.g.len() != nx || t.c_mat.shape() != (t.c.len(), nx) {
            return dim("terminal blocks have wrong shape".into());
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        let stages_ok = self.stages.iter().all(|s| {
            finite(s.h.as_slice()) && finite(s.g.as_slice()) && finite(s.ab.as_slice()) && finite(s.b.as_slice()) && finite(s.c_mat.as_slice()) && finite(s.c.as_slice())
        });
        if !stages_ok || !finite(self.e0.as_slice()) || !finite(t.h.as_slice()) || !finite(t.g.as_slice()) || !finite(t.c_mat.as_slice()) || !finite(t.c.as_slice()) {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution, QpError> {
        self.validate()?;
        let mut reg = self.clone();
        for s in &mut reg.stages {
            regularize(&mut s.h);
        }
        regularize(&mut reg.terminal.h);
        with_polish(interior_point(&reg, settings), || reg.to_dense(), settings.tol)
    }

    /// The same problem with all blocks assembled into dense matrices.
    pub fn to_dense(&self) -> DenseQp {
        let (nx, nz) = (self.nx, self.nz());
        let (n, m, p) = (self.n_vars(), self.n_eq(), self.n_ineq());
        let n_stages = self.stages.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        let mut c_mat = DMatrix::zeros(p, n);
        let mut c = DVector::zeros(p);
        a.view_mut((0, 0), (nx, nx)).fill_with_identity();
        b.rows_mut(0, nx).copy_from(&self.e0);
        let offsets = self.ineq_offsets();
        for (k, s) in self.stages.iter().enumerate() {
            let col = k * nz;
            h.view_mut((col, col), (nz, nz)).copy_from(&s.h);
            g.rows_mut(col, nz).copy_from(&s.g);
            let row = (k + 1) * nx;
            a.view_mut((row, col), (nx, nz)).copy_from(&s.ab);
            let next = (k + 1) * nz;
            for i in 0..nx {
                a[(row + i, next + i)] = -1.0;
            }
            b.rows_mut(row, nx).copy_from(&s.b);
            let r = offsets[k];
            c_mat.view_mut((r, col), (s.c.len(), nz)).copy_from(&s.c_mat);
            c.rows_mut(r, s.c.len()).copy_from(&s.c);
        }
        let col = n_stages * nz;
        h.view_mut((col, col), (nx, nx)).copy_from(&self.terminal.h);
        g.rows_mut(col, nx).copy_from(&self.terminal.g);
        let r = offsets[n_stages];
        c_mat.view_mut((r, col), (self.terminal.c.len(), nx)).copy_from(&self.terminal.c_mat);
        c.rows_mut(r, self.terminal.c.len()).copy_from(&self.terminal.c);
        DenseQp { h, g, a, b, c_mat, c }
    }
}

impl KktOps for StructuredQp {
    fn n(&self) -> usize {
        self.n_vars()
    }
    fn m_eq(&self) -> usize {
        self.n_eq()
    }
    fn m_in(&self) -> usize {
        self.n_ineq()
    }

    fn g(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_vars());
        let nz = self.nz();
        for (k, s) in self.stages.iter().enumerate() {
            g.rows_mut(k * nz, nz).copy_from(&s.g);
        }
        g.rows_mut(self.stages.len() * nz, self.nx).copy_from(&self.terminal.g);
        g
    }

    fn b(&self) -> DVector<f64> {
        let nx = self.nx;
        let mut b = DVector::zeros(self.n_eq());
        b.rows_mut(0, nx).copy_from(&self.e0);
        for (k, s) in self.stages.iter().enumerate() {
            b.rows_mut((k + 1) * nx, nx).copy_from(&s.b);
        }
        b
    }

    fn c(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.n_ineq());
        let off = self.ineq_offsets();
        for (k, s) in self.stages.iter().enumerate() {
            c.rows_mut(off[k], s.c.len()).copy_from(&s.c);
        }
        let last = off[self.stages.len()];
        c.rows_mut(last, self.terminal.c.len()).copy_from(&self.terminal.c);
        c
    }

    fn mul_h(&self, x: &DVector<f64>) -> DVector<f64> {
        let nz = self.nz();
        let mut out = DVector::zeros(x.len());
        for (k, s) in self.stages.iter().enumerate() {
            out.rows_mut(k * nz, nz).copy_from(&(&s.h * x.rows(k * nz, nz)));
        }
        let t = self.stages.len() * nz;
        out.rows_mut(t, self.nx).copy_from(&(&self.terminal.h * x.rows(t, self.nx)));
        out
    }

    fn mul_a(&self, x: &DVector<f64>) -> DVector<f64> {
        let (nx, nz) = (self.nx, self.nz());
        let mut out = DVector::zeros(self.n_eq());
        out.rows_mut(0, nx).copy_from(&x.rows(0, nx));
        for (k, s) in self.stages.iter().enumerate() {
            let v = &s.ab * x.rows(k * nz, nz) - x.rows((k + 1) * nz, nx);
            out.rows_mut((k + 1) * nx, nx).copy_from(&v);
        }
        out
    }

    fn mul_at(&self, y: &DVector<f64>) -> DVector<f64> {
        let (nx, nz) = (self.nx, self.nz());
        let mut out = DVector::zeros(self.n_vars());
        {
            let mut head = out.rows_mut(0, nx);
            head += y.rows(0, nx);
        }
        for (k, s) in self.stages.iter().enumerate() {
            let yk = y.rows((k + 1) * nx, nx);
            let mut blk = out.rows_mut(k * nz, nz);
            blk += s.ab.tr_mul(&yk);
            let mut next = out.rows_mut((k + 1) * nz, nx);
            next -= yk;
        }
        out
    }

    fn mul_c(&self, x: &DVector<f64>) -> DVector<f64> {
        let nz = self.nz();
        let off = self.ineq_offsets();
        let mut out = DVector::zeros(self.n_ineq());
        for (k, s) in self.stages.iter().enumerate() {
            out.rows_mut(off[k], s.c.len()).copy_from(&(&s.c_mat * x.rows(k * nz, nz)));
        }
        let t = self.stages.len() * nz;
        let last = off[self.stages.len()];
        out.rows_mut(last, self.terminal.c.len()).copy_from(&(&self.terminal.c_mat * x.rows(t, self.nx)));
        out
    }

    fn mul_ct(&self, z: &DVector<f64>) -> DVector<f64> {
        let nz = self.nz();
        let off = self.ineq_offsets();
        let mut out = DVector::zeros(self.n_vars());
        for (k, s) in self.stages.iter().enumerate() {
            out.rows_mut(k * nz, nz).copy_from(&s.c_mat.tr_mul(&z.rows(off[k], s.c.len())));
        }
        let t = self.stages.len() * nz;
        let last = off[self.stages.len()];
        out.rows_mut(t, self.nx).copy_from(&self.terminal.c_mat.tr_mul(&z.rows(last, self.terminal.c.len())));
        out
    }

    fn factor(&self, w: &DVector<f64>) -> Result<Box<dyn ReducedSolve + '_>, QpError> {
        RiccatiFactor::new(self, w).map(|f| Box::new(f) as Box<dyn ReducedSolve>)
    }
}

fn add_weighted_gram(h: &DMatrix<f64>, c_mat: &DMatrix<f64>, w: nalgebra::DVectorView<f64>) -> DMatrix<f64> {
    if c_mat.nrows() == 0 {
        return h.clone();
    }
    let mut scaled = c_mat.clone();
    for (r, wr) in w.iter().enumerate() {
        scaled.row_mut(r).scale_mut(*wr);
    }
    h + c_mat.transpose() * scaled
}

/// Backward Riccati sweep for the reduced stagewise system. Only the matrix
/// part is stored; each right-hand side needs one vector sweep back and forth.
struct RiccatiFactor<'a> {
    qp: &'a StructuredQp,
    /// Cost-to-go Hessians `P_0 .. P_N`.
    p: Vec<DMatrix<f64>>,
    /// Stagewise Cholesky factors of `Q_uu`.
    quu: Vec<Cholesky<f64, Dyn>>,
    /// `Q_ux` per stage.
    qux: Vec<DMatrix<f64>>,
    /// Feedback gains `K_k = -Q_uu^{-1} Q_ux`.
    gain: Vec<DMatrix<f64>>,
}

impl<'a> RiccatiFactor<'a> {
    fn new(qp: &'a StructuredQp, w: &DVector<f64>) -> Result<Self, QpError> {
        let (nx, nu) = (qp.nx, qp.nu);
        let n_stages = qp.stages.len();
        let off = qp.ineq_offsets();
        let mut p = vec![DMatrix::zeros(0, 0); n_stages + 1];
        let mut quu = Vec::with_capacity(n_stages);
        let mut qux = Vec::with_capacity(n_stages);
        let mut gain = Vec::with_capacity(n_stages);
        let t = &qp.terminal;
        p[n_stages] = add_weighted_gram(&t.h, &t.c_mat, w.rows(off[n_stages], t.c.len()));
        for k in (0..n_stages).rev() {
            let s = &qp.stages[k];
            let ht = add_weighted_gram(&s.h, &s.c_mat, w.rows(off[k], s.c.len()));
            let pab = &p[k + 1] * &s.ab;
            let q = ht + s.ab.transpose() * pab;
            let q_xx = q.view((0, 0), (nx, nx));
            let q_ux = q.view((nx, 0), (nu, nx)).into_owned();
            let q_uu = q.view((nx, nx), (nu, nu)).into_owned();
            let chol = Cholesky::new(q_uu).ok_or(QpError::Singular)?;
            let k_gain = -chol.solve(&q_ux);
            let mut pk = q_xx + q_ux.transpose() * &k_gain;
            pk = (&pk + pk.transpose()) * 0.5;
            p[k] = pk;
            quu.push(chol);
            qux.push(q_ux);
            gain.push(k_gain);
        }
        quu.reverse();
        qux.reverse();
        gain.reverse();
        Ok(Self { qp, p, quu, qux, gain })
    }
}

impl ReducedSolve for RiccatiFactor<'_> {
    fn solve(&self, g: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qp = self.qp;
        let (nx, nu) = (qp.nx, qp.nu);
        let nz = nx + nu;
        let n_stages = qp.stages.len();
        // backward: affine cost-to-go terms
        let mut pv = vec![DVector::zeros(0); n_stages + 1];
        let mut ff = vec![DVector::zeros(0); n_stages];
        pv[n_stages] = g.rows(n_stages * nz, nx).into_owned();
        for k in (0..n_stages).rev() {
            let s = &qp.stages[k];
            let bk = b.rows((k + 1) * nx, nx);
            let carry = &self.p[k + 1] * bk + &pv[k + 1];
            let q = g.rows(k * nz, nz) + s.ab.tr_mul(&carry);
            let q_x = q.rows(0, nx);
            let q_u = q.rows(nx, nu).into_owned();
            let kff = -self.quu[k].solve(&q_u);
            pv[k] = q_x + self.qux[k].tr_mul(&kff);
            ff[k] = kff;
        }
        // forward: states, controls and multipliers
        let mut x = DVector::zeros(qp.n_vars());
        let mut y = DVector::zeros(qp.n_eq());
        let mut dx = -b.rows(0, nx).into_owned();
        y.rows_mut(0, nx).copy_from(&(-(&self.p[0] * &dx + &pv[0])));
        for k in 0..n_stages {
            let du = &self.gain[k] * &dx + &ff[k];
            x.rows_mut(k * nz, nx).copy_from(&dx);
            x.rows_mut(k * nz + nx, nu).copy_from(&du);
            let s = &qp.stages[k];
            let next = s.ab.columns(0, nx) * &dx + s.ab.columns(nx, nu) * &du + b.rows((k + 1) * nx, nx);
            y.rows_mut((k + 1) * nx, nx).copy_from(&(&self.p[k + 1] * &next + &pv[k + 1]));
            dx = next;
        }
        x.rows_mut(n_stages * nz, nx).copy_from(&dx);
        (x, y)
    }
}

// ---------------------------------------------------------------------------
// Interior point
// ---------------------------------------------------------------------------

fn regularize(h: &mut DMatrix<f64>) {
    let is_diagonal = (0..h.nrows()).all(|i| (0..h.ncols()).all(|j| i == j || h[(i, j)] == 0.0));
    let min_eig = if is_diagonal {
        h.diagonal().min()
    } else {
        h.clone().symmetric_eigenvalues().min()
    };
    if h.nrows() > 0 && min_eig < HESSIAN_REGULARIZATION {
        for i in 0..h.nrows() {
            h[(i, i)] += HESSIAN_REGULARIZATION;
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0, f64::min)
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    ineq: DVector<f64>,
}

impl Residuals {
    fn norm(&self) -> f64 {
        self.dual.amax().max(self.eq.amax()).max(self.ineq.amax())
    }
}

fn residuals<P: KktOps>(qp: &P, g: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, s: &DVector<f64>) -> Residuals {
    Residuals {
        dual: qp.mul_h(x) + g + qp.mul_at(y) + qp.mul_ct(z),
        eq: qp.mul_a(x) + b,
        ineq: qp.mul_c(x) + c + s,
    }
}

fn finish(x: DVector<f64>, y: DVector<f64>, mut z: DVector<f64>, s: DVector<f64>, iterations: usize, kkt_residual: f64) -> QpSolution {
    z.apply(|v| {
        if *v < MULTIPLIER_FLOOR {
            *v = 0.0;
        }
    });
    let active_set = (0..z.len())
        .filter(|&j| z[j] > ACTIVE_THRESHOLD || s[j] < ACTIVE_THRESHOLD)
        .collect();
    QpSolution { x, y, z, slack: s, active_set, iterations, kkt_residual }
}

fn interior_point<P: KktOps>(qp: &P, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let (n, m, p) = (qp.n(), qp.m_eq(), qp.m_in());
    let (g, b, c) = (qp.g(), qp.b(), qp.c());
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);

    if p == 0 {
        let factor = qp.factor(&DVector::zeros(0))?;
        let (x, y) = factor.solve(&g, &b);
        let r = residuals(qp, &g, &b, &c, &x, &y, &DVector::zeros(0), &DVector::zeros(0));
        let res = r.norm();
        if !res.is_finite() {
            return Err(QpError::Singular);
        }
        return Ok(finish(x, y, DVector::zeros(0), DVector::zeros(0), 1, res));
    }

    let mut s = (-&c).map(|v| v.max(1.0));
    let mut z = DVector::from_element(p, 1.0);
    let mut best: Option<(f64, QpSolution)> = None;
    let tol = settings.tol;
    let mut performed = settings.max_iter;

    for iter in 0..settings.max_iter {
        performed = iter;
        let r = residuals(qp, &g, &b, &c, &x, &y, &z, &s);
        let mu = s.dot(&z) / p as f64;
        let res = r.norm().max(s.component_mul(&z).amax());
        if !res.is_finite() || z.amax() > 1e12 {
            // diverging multipliers signal an empty feasible set
            break;
        }
        if best.as_ref().is_none_or(|(v, _)| res < *v) {
            best = Some((res, finish(x.clone(), y.clone(), z.clone(), s.clone(), iter, res)));
        }
        if res <= tol {
            return Ok(finish(x, y, z, s, iter, res));
        }

        let w = z.component_div(&s);
        let Ok(factor) = qp.factor(&w) else { break };
        // Newton direction for right-hand sides (rd, re, ri, rc), with rc the
        // complementarity residual s.z - target
        let solve = |rd: &DVector<f64>, re: &DVector<f64>, ri: &DVector<f64>, rc: &DVector<f64>| {
            // reduced gradient: rd + C^T S^{-1} (Z ri - rc)
            let t = (z.component_mul(ri) - rc).component_div(&s);
            let gt = rd + qp.mul_ct(&t);
            let (dx, dy) = factor.solve(&gt, re);
            let ds = -ri - qp.mul_c(&dx);
            let dz = (-rc - z.component_mul(&ds)).component_div(&s);
            (dx, dy, ds, dz)
        };
        // one step of iterative refinement on the unreduced system once the
        // weights are badly scaled
        let refine = w.amax() > REFINEMENT_WEIGHT;
        let direction = |rc: &DVector<f64>| {
            let (mut dx, mut dy, mut ds, mut dz) = solve(&r.dual, &r.eq, &r.ineq, rc);
            if !refine {
                return (dx, dy, ds, dz);
            }
            let ed = &r.dual + qp.mul_h(&dx) + qp.mul_at(&dy) + qp.mul_ct(&dz);
            let ee = &r.eq + qp.mul_a(&dx);
            let ei = &r.ineq + qp.mul_c(&dx) + &ds;
            let ec = rc + z.component_mul(&ds) + s.component_mul(&dz);
            let (cx, cy, cs, cz) = solve(&ed, &ee, &ei, &ec);
            dx += cx;
            dy += cy;
            ds += cs;
            dz += cz;
            (dx, dy, ds, dz)
        };
        let sz = s.component_mul(&z);
        let (_, _, ds_aff, dz_aff) = direction(&sz);
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&z, &dz_aff));
        let mu_aff = (&s + &ds_aff * alpha_aff).dot(&(&z + &dz_aff * alpha_aff)) / p as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc = sz + ds_aff.component_mul(&dz_aff) - DVector::from_element(p, sigma * mu);
        let (dx, dy, ds, dz) = direction(&rc);
        let alpha = (0.995 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
    }

    let Some((residual, best)) = best else { return Err(QpError::Singular) };
    let primal = (qp.mul_a(&best.x) + &b).amax().max((qp.mul_c(&best.x) + &c).max().max(0.0));
    if primal > tol.sqrt() {
        return Err(QpError::Infeasible { residual: primal });
    }
    Err(QpError::NotConverged { iterations: performed, residual, best: Box::new(best) })
}

fn with_polish(result: Result<QpSolution, QpError>, dense: impl FnOnce() -> DenseQp, tol: f64) -> Result<QpSolution, QpError> {
    match result {
        Err(QpError::NotConverged { iterations, residual, best }) => match polish(&dense(), &best, tol) {
            Some(sol) => Ok(sol),
            None => Err(QpError::NotConverged { iterations, residual, best }),
        },
        other => other,
    }
}

/// Fallback for a run that stalls short of `tol` (badly scaled weights late in
/// the interior point): fixes the active set of the best iterate and solves
/// the equality-constrained KKT system directly.
fn polish(qp: &DenseQp, best: &QpSolution, tol: f64) -> Option<QpSolution> {
    let (n, m) = (qp.g.len(), qp.b.len());
    let active: Vec<usize> = (0..qp.c.len()).filter(|&j| best.z[j] > best.slack[j]).collect();
    let k = m + active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    rhs.rows_mut(0, n).copy_from(&-&qp.g);
    let rows = (0..m).map(|i| (qp.a.row(i), -qp.b[i])).chain(active.iter().map(|&j| (qp.c_mat.row(j), -qp.c[j])));
    for (i, (row, value)) in rows.enumerate() {
        kkt.view_mut((n + i, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + i), (n, 1)).copy_from(&row.transpose());
        rhs[n + i] = value;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    let correction = lu.solve(&(&rhs - &kkt * &sol))?;
    sol += correction;

    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, m).into_owned();
    let mut z = DVector::zeros(qp.c.len());
    for (r, &j) in active.iter().enumerate() {
        z[j] = sol[n + m + r].max(0.0);
    }
    let mut s = (&qp.c_mat * &x + &qp.c).map(|v| (-v).max(0.0));
    for &j in &active {
        s[j] = 0.0;
    }
    let r = residuals(qp, &qp.g, &qp.b, &qp.c, &x, &y, &z, &s);
    let res = r.norm().max(s.component_mul(&z).amax());
    (res <= tol && res.is_finite()).then(|| finish(x, y, z, s, best.iterations, res))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(h: DMatrix<f64>, g: DVector<f64>, c_mat: DMatrix<f64>, c: DVector<f64>) -> DenseQp {
        let n = g.len();
        DenseQp { h, g, a: DMatrix::zeros(0, n), b: DVector::zeros(0), c_mat, c }
    }

    #[test]
    fn scalar_with_active_bound() {
        // min 1/2 x^2  s.t.  x + 1 <= 0
        let qp = dense(DMatrix::identity(1, 1), DVector::zeros(1), DMatrix::identity(1, 1), DVector::from_element(1, 1.0));
        let sol = qp.solve(&QpSettings::default()).unwrap();
        assert!((sol.x[0] + 1.0).abs() < 1e-8);
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn unconstrained_identity() {
        let qp = dense(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(0, 2), DVector::zeros(0));
        let sol = qp.solve(&QpSettings::default()).unwrap();
        assert!((sol.x - DVector::from_vec(vec![-1.0, -2.0])).amax() < 1e-12);
    }

    #[test]
    fn infeasible_is_reported() {
        // x <= -1 and -x <= -1
        let qp = dense(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(matches!(qp.solve(&QpSettings::default()), Err(QpError::Infeasible { .. })));
    }

    fn small_structured() -> StructuredQp {
        let (nx, nu) = (2, 1);
        let stage = |k: usize| QpStage {
            h: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.1])),
            g: DVector::from_vec(vec![0.1 * k as f64, -0.2, 0.3]),
            ab: DMatrix::from_row_slice(2, 3, &[1.0, 0.1, 0.0, -0.2, 0.9, 0.1 + 0.01 * k as f64]),
            b: DVector::from_vec(vec![0.01, -0.02 * k as f64]),
            c_mat: DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]),
            c: DVector::from_vec(vec![-0.5, -0.5]),
        };
        StructuredQp {
            nx,
            nu,
            e0: DVector::from_vec(vec![-1.0, 0.5]),
            stages: (0..5).map(stage).collect(),
            terminal: QpTerminal {
                h: DMatrix::identity(2, 2) * 2.0,
                g: DVector::zeros(2),
                c_mat: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                c: DVector::from_element(1, -0.8),
            },
        }
    }

    #[test]
    fn riccati_matches_dense_backend() {
        let qp = small_structured();
        let settings = QpSettings::default();
        let a = qp.solve(&settings).unwrap();
        let b = qp.to_dense().solve(&settings).unwrap();
        assert!((&a.x - &b.x).amax() < 1e-7);
        assert!((&a.y - &b.y).amax() < 1e-7);
        assert!((&a.z - &b.z).amax() < 1e-7);
        assert_eq!(a.active_set, b.active_set);
        assert!(!a.active_set.is_empty());
    }

    #[test]
    fn structured_kkt_conditions_hold() {
        let qp = small_structured();
        let sol = qp.solve(&QpSettings::default()).unwrap();
        let d = qp.to_dense();
        let stat = &d.h * &sol.x + &d.g + d.a.tr_mul(&sol.y) + d.c_mat.tr_mul(&sol.z);
        assert!(stat.amax() < 1e-7);
        assert!((&d.a * &sol.x + &d.b).amax() < 1e-8);
        let ineq = &d.c_mat * &sol.x + &d.c;
        assert!(ineq.max() < 1e-8);
        assert!(ineq.component_mul(&sol.z).amax() < 1e-7);
        assert!(sol.z.min() >= 0.0);
    }

    #[test]
    fn semidefinite_blocks_are_regularized() {
        let mut qp = small_structured();
        for s in &mut qp.stages {
            s.h[(2, 2)] = 0.0;
        }
        let sol = qp.solve(&QpSettings::default()).unwrap();
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn dimension_errors() {
        let mut qp = small_structured();
        qp.e0 = DVector::zeros(3);
        assert!(matches!(qp.solve(&QpSettings::default()), Err(QpError::Dimension(_))));
        let mut qp = small_structured();
        qp.stages[1].g[0] = f64::NAN;
        assert_eq!(qp.solve(&QpSettings::default()), Err(QpError::NonFinite));
    }
}
