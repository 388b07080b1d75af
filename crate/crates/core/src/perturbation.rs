//! Sensitivity of the QP solution to errors in the equality Jacobian.
//!
//! The QP with Jacobian `J + P` has optimality conditions `F(dy, p) = 0` in
//! `dy = (dw, dmu, dlambda)`, with `p` the entries of `P`. `M = dF/d(dy)` at a
//! solution and `N = -dF/dp` give the first-order prediction
//! `dy(p) ~ dy(0) + M^{-1} N p`, and `rho = |M^{-1}|` bounds the distance to
//! optimum by `rho * sqrt(|P^T dlambda|^2 + |P dw|^2)`.
//!
//! Rows of `F` are ordered stationarity, complementarity, equality; the
//! complementarity rows enter with a negative sign. `p` stacks the blocks
//! `P_0 .. P_{N-1}` in order, each block row-major.

// links the system OpenBLAS that provides LAPACK
extern crate openblas_src;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::QpSolution;
use crate::transcription::{QpData, QpStep};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbationError {
    #[error("matrix is numerically singular (smallest singular value {sigma_min:.3e})")]
    NearSingular { sigma_min: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular value decomposition failed (LAPACK info {0})")]
    Decomposition(i32),
}

/// Smallest singular value accepted by [`rho_gamma`].
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KktMatrixBundle {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub n_w: usize,
    pub n_ineq: usize,
    pub n_eq: usize,
    pub n_p: usize,
}

/// `M` at the QP solution `sol` of `data`: complementarity rows use the total
/// multipliers and the linearized constraint values at the solution.
pub fn build_m(data: &QpData, sol: &QpSolution) -> DMatrix<f64> {
    let dense = data.qp.to_dense();
    let (n_w, n_i, n_e) = (dense.g.len(), dense.c.len(), dense.b.len());
    let size = n_w + n_i + n_e;
    let mut m = DMatrix::zeros(size, size);
    m.view_mut((0, 0), (n_w, n_w)).copy_from(&dense.h);
    m.view_mut((0, n_w), (n_w, n_i)).copy_from(&dense.c_mat.transpose());
    m.view_mut((0, n_w + n_i), (n_w, n_e)).copy_from(&dense.a.transpose());
    let lin = &dense.c_mat * &sol.x + &dense.c;
    for j in 0..n_i {
        let row = n_w + j;
        let mut r = m.view_mut((row, 0), (1, n_w));
        r.copy_from(&(dense.c_mat.row(j) * -sol.z[j]));
        m[(row, n_w + j)] = -lin[j];
    }
    m.view_mut((n_w + n_i, 0), (n_e, n_w)).copy_from(&dense.a);
    m
}

/// `N = -dF/dp` for the increments in `step`.
pub fn build_n(data: &QpData, step: &QpStep) -> DMatrix<f64> {
    let qp = &data.qp;
    let (nx, nu, horizon) = (qp.nx, qp.nu, qp.horizon());
    let nz = nx + nu;
    let (n_w, n_i, n_e) = (qp.n_vars(), qp.n_ineq(), qp.n_eq());
    let n_p = horizon * nx * nz;
    let mut n = DMatrix::zeros(n_w + n_i + n_e, n_p);
    for k in 0..horizon {
        let dlam = &step.dlambda[k + 1];
        let dwk = step.dw().node(k);
        for r in 0..nx {
            for c in 0..nz {
                let col = k * nx * nz + r * nz + c;
                // stationarity row of w_k entry c gains P[r, c] * dlambda[r]
                n[(k * nz + c, col)] = -dlam[r];
                // equality row r of interval k gains P[r, c] * dw_k[c]
                n[(n_w + n_i + (k + 1) * nx + r, col)] = -dwk[c];
            }
        }
    }
    n
}

pub fn build_bundle(data: &QpData, sol: &QpSolution, step: &QpStep) -> KktMatrixBundle {
    let m = build_m(data, sol);
    let n = build_n(data, step);
    KktMatrixBundle {
        n_w: data.qp.n_vars(),
        n_ineq: data.qp.n_ineq(),
        n_eq: data.qp.n_eq(),
        n_p: n.ncols(),
        m,
        n,
    }
}

/// Stacks the perturbation blocks into `p`.
pub fn vectorize(blocks: &[DMatrix<f64>]) -> DVector<f64> {
    let len = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(len, blocks.iter().flat_map(|b| b.transpose().iter().copied().collect::<Vec<_>>()))
}

/// `(P^T dlambda; 0; P dw)` in the row layout of `F`, which equals `-N p`.
pub fn perturbation_product(data: &QpData, blocks: &[DMatrix<f64>], step: &QpStep) -> DVector<f64> {
    let qp = &data.qp;
    let (nx, nu) = (qp.nx, qp.nu);
    let nz = nx + nu;
    let (n_w, n_i, n_e) = (qp.n_vars(), qp.n_ineq(), qp.n_eq());
    let mut out = DVector::zeros(n_w + n_i + n_e);
    for (k, p) in blocks.iter().enumerate() {
        out.rows_mut(k * nz, nz).copy_from(&p.tr_mul(&step.dlambda[k + 1]));
        out.rows_mut(n_w + n_i + (k + 1) * nx, nx).copy_from(&(p * step.dw().node(k)));
    }
    out
}

/// `sqrt(sum |P_k^T dlambda_{k+1}|^2 + |P_k dw_k|^2)`.
pub fn perturbation_size(blocks: &[DMatrix<f64>], step: &QpStep) -> f64 {
    let dw = step.dw();
    blocks
        .iter()
        .enumerate()
        .map(|(k, p)| p.tr_mul(&step.dlambda[k + 1]).norm_squared() + (p * dw.node(k)).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Singular values of `m` in descending order (LAPACK `dgesdd`, values only).
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>, PerturbationError> {
    let (rows, cols) = m.shape();
    let dim = |v: usize| i32::try_from(v).map_err(|_| PerturbationError::Dimension(format!("{v} exceeds LAPACK index range")));
    let (r, c) = (dim(rows)?, dim(cols)?);
    let mut a = m.as_slice().to_vec();
    let mut s = vec![0.0; rows.min(cols)];
    let mut iwork = vec![0i32; 8 * rows.min(cols)];
    let (mut u, mut vt) = ([0.0], [0.0]);
    let mut query = [0.0];
    let mut info = 0;
    // SAFETY: buffers are sized as dgesdd requires for jobz = 'N'.
    unsafe {
        lapack::dgesdd(b'N', r, c, &mut a, r.max(1), &mut s, &mut u, 1, &mut vt, 1, &mut query, -1, &mut iwork, &mut info);
    }
    let lwork = query[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    let lwork_i = dim(work.len())?;
    if info == 0 {
        unsafe {
            lapack::dgesdd(b'N', r, c, &mut a, r.max(1), &mut s, &mut u, 1, &mut vt, 1, &mut work, lwork_i, &mut iwork, &mut info);
        }
    }
    if info != 0 {
        return Err(PerturbationError::Decomposition(info));
    }
    Ok(s)
}

/// `rho = 1 / sigma_min(M)` and `gamma = std(1 / sigma_j(M)) + 1`
/// (population standard deviation).
pub fn rho_gamma(m: &DMatrix<f64>) -> Result<(f64, f64), PerturbationError> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(PerturbationError::Dimension("M must be square and nonempty".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PerturbationError::Dimension("M has non-finite entries".into()));
    }
    let sv = singular_values(m)?;
    let sigma_min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(sigma_min >= SINGULAR_TOLERANCE) {
        return Err(PerturbationError::NearSingular { sigma_min });
    }
    let inv: Vec<f64> = sv.iter().map(|s| 1.0 / s).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let var = inv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inv.len() as f64;
    Ok((1.0 / sigma_min, var.sqrt() + 1.0))
}

pub fn rho_offline(m: &DMatrix<f64>) -> Result<f64, PerturbationError> {
    rho_gamma(m).map(|(rho, _)| rho)
}

pub fn gamma_offline(m: &DMatrix<f64>) -> Result<f64, PerturbationError> {
    rho_gamma(m).map(|(_, gamma)| gamma)
}

/// Distance between the inexact and exact QP solutions at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtoRecord {
    pub instant: usize,
    pub e: f64,
    pub e_bar: f64,
    pub satisfied: bool,
    /// Whether the two solves ended with the same active set.
    pub same_active_set: bool,
}

/// Slack on the comparison `e <= e_bar`.
pub const DTO_SLACK: f64 = 1e-9;

pub fn measure_dto(instant: usize, stale: &QpStep, exact: &QpStep, e_bar: f64) -> DtoRecord {
    let e = (stale.stacked() - exact.stacked()).norm();
    DtoRecord {
        instant,
        e,
        e_bar,
        satisfied: e <= e_bar + DTO_SLACK,
        same_active_set: stale.active_set == exact.active_set,
    }
}
