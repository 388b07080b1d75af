//! Curvature-like measures of nonlinearity (CMoN) and the partial sensitivity
//! update rule built on them.
//!
//! For shooting interval `k` between consecutive linearization points
//! `w^{i-1}` and `w^i = w^{i-1} + q`:
//!
//! ```text
//! kappa_k       = |phi(w^i) - phi(w^{i-1}) - J q| / |J q|
//! kappa_dual_k  = |dlambda^T grad phi(w^i) - dlambda^T J| / |dlambda^T J|
//! ```
//!
//! where `J` is the Jacobian block held for the interval. A block is kept when
//! both measures stay within their thresholds, which are sized so that the
//! distance between the inexact and the exact QP solution stays below a
//! tolerance `e_bar`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::integrator::SensitivityBlock;

/// Tuning of the update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmonSettings {
    /// Share of the tolerance given to the primal error, in `(0, 1)`.
    pub c1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Lower bound on the fraction of blocks refreshed per iteration.
    pub min_update_fraction: f64,
    /// Replaces the tolerance-derived thresholds when set.
    #[serde(default)]
    pub fixed_thresholds: Option<(f64, f64)>,
}

impl Default for CmonSettings {
    fn default() -> Self {
        Self {
            c1: 0.1,
            alpha: 1.0,
            beta: 1.0,
            eps_abs: 0.1,
            eps_rel: 0.1,
            min_update_fraction: 0.0,
            fixed_thresholds: None,
        }
    }
}

impl CmonSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(format!("c1 must lie in (0, 1), got {}", self.c1));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err("alpha and beta must be positive".into());
        }
        if !(self.eps_abs >= 0.0 && self.eps_rel >= 0.0) {
            return Err("tolerances must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.min_update_fraction) {
            return Err("min_update_fraction must lie in [0, 1]".into());
        }
        if let Some((a, b)) = self.fixed_thresholds {
            if a.is_nan() || b.is_nan() || a < 0.0 || b < 0.0 {
                return Err("fixed thresholds must be nonnegative".into());
            }
        }
        Ok(())
    }
}

/// Primal measure. Zero when the first-order term vanishes.
pub fn primal_cmon(phi_curr: &DVector<f64>, phi_prev: &DVector<f64>, dir_prev: &DVector<f64>) -> f64 {
    let den = dir_prev.norm();
    if den == 0.0 {
        return 0.0;
    }
    (phi_curr - phi_prev - dir_prev).norm() / den
}

/// Adjoint measure. Zero when the previous directional row vanishes.
pub fn dual_cmon(adj_curr: &DVector<f64>, adj_prev: &DVector<f64>) -> f64 {
    let den = adj_prev.norm();
    if den == 0.0 {
        return 0.0;
    }
    (adj_curr - adj_prev).norm() / den
}

/// Indices (ascending) of the blocks to refresh. A block is kept when both
/// measures are at or below their thresholds; at least
/// `ceil(min_fraction * N)` blocks are refreshed, topping up by largest
/// primal measure with ties going to the lower index.
pub fn update_decision(kappa: &[f64], kappa_dual: &[f64], eta_pri: f64, eta_dual: f64, min_fraction: f64) -> Vec<usize> {
    let n = kappa.len();
    let mut refresh: Vec<bool> = (0..n).map(|k| kappa[k] > eta_pri || kappa_dual[k] > eta_dual).collect();
    let floor = ((min_fraction * n as f64).ceil() as usize).min(n);
    let mut count = refresh.iter().filter(|r| **r).count();
    if count < floor {
        let mut order: Vec<usize> = (0..n).filter(|&k| !refresh[k]).collect();
        order.sort_by(|&a, &b| kappa[b].total_cmp(&kappa[a]).then(a.cmp(&b)));
        for k in order {
            if count >= floor {
                break;
            }
            refresh[k] = true;
            count += 1;
        }
    }
    (0..n).filter(|&k| refresh[k]).collect()
}

/// Tolerance `e_bar = eps_abs sqrt(n) + eps_rel |dy_prev|`.
pub fn dto_tolerance(eps_abs: f64, eps_rel: f64, n: usize, dy_prev_norm: f64) -> f64 {
    eps_abs * (n as f64).sqrt() + eps_rel * dy_prev_norm
}

/// Offline constants entering the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConstants {
    pub rho0: f64,
    pub gamma0: f64,
}

/// Thresholds from the tolerance and the norms of the previous directional
/// sensitivities. A zero norm gives an infinite threshold on that branch.
pub fn compute_thresholds(
    e_bar: f64,
    constants: ThresholdConstants,
    settings: &CmonSettings,
    v_pri_norm: f64,
    v_dual_norm: f64,
) -> (f64, f64) {
    if e_bar == 0.0 {
        return (0.0, 0.0);
    }
    let ThresholdConstants { rho0, gamma0 } = constants;
    let scaled = gamma0 * e_bar / rho0;
    let eta_pri = if v_pri_norm == 0.0 {
        f64::INFINITY
    } else {
        scaled * settings.c1.sqrt() / (2.0 * settings.alpha * v_pri_norm)
    };
    let eta_dual = if v_dual_norm == 0.0 {
        f64::INFINITY
    } else {
        scaled * (1.0 - settings.c1).sqrt() / (settings.beta * v_dual_norm)
    };
    (eta_pri, eta_dual)
}

/// Stacked norms of the cached primal and adjoint directional products.
pub fn v_norms(dir_pri: &[DVector<f64>], dir_dual: &[DVector<f64>]) -> (f64, f64) {
    let pri = dir_pri.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    let dual = dir_dual.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    (pri, dual)
}

/// Jacobian blocks held by the controller plus the previous-iteration data
/// the measures compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityStore {
    pub blocks: Vec<SensitivityBlock>,
    pub prev_phi: Vec<DVector<f64>>,
    pub prev_nodes: Vec<DVector<f64>>,
    /// `J_k q_k` from the previous iteration.
    pub prev_dir_pri: Vec<DVector<f64>>,
    /// `J_k^T dlambda_{k+1}` from the previous iteration.
    pub prev_dir_dual: Vec<DVector<f64>>,
    /// False until the caches hold data from a completed iteration.
    pub caches_valid: bool,
}

impl SensitivityStore {
    pub fn new(horizon: usize, nx: usize, nu: usize) -> Self {
        Self {
            blocks: vec![SensitivityBlock { value: DMatrix::zeros(nx, nx + nu), stale: true }; horizon],
            prev_phi: vec![DVector::zeros(nx); horizon],
            prev_nodes: vec![DVector::zeros(nx + nu); horizon],
            prev_dir_pri: vec![DVector::zeros(nx); horizon],
            prev_dir_dual: vec![DVector::zeros(nx + nu); horizon],
            caches_valid: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.blocks.len()
    }

    /// Records the end-of-iteration data: `phi` and nodes at which the QP was
    /// built, and the directional products with the step just taken.
    pub fn record(
        &mut self,
        phi: &[DVector<f64>],
        nodes: &[DVector<f64>],
        dw: &[DVector<f64>],
        dlambda_next: &[DVector<f64>],
    ) {
        for k in 0..self.horizon() {
            let block = &self.blocks[k].value;
            self.prev_phi[k] = phi[k].clone();
            self.prev_nodes[k] = nodes[k].clone();
            self.prev_dir_pri[k] = block * &dw[k];
            self.prev_dir_dual[k] = block.tr_mul(&dlambda_next[k]);
        }
        self.caches_valid = true;
    }

    pub fn v_norms(&self) -> (f64, f64) {
        v_norms(&self.prev_dir_pri, &self.prev_dir_dual)
    }
}

/// Per-iteration record of the update rule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CmonState {
    pub kappa: Vec<f64>,
    pub kappa_dual: Vec<f64>,
    pub eta_pri: f64,
    pub eta_dual: f64,
    pub e_bar: f64,
    pub constants: Option<ThresholdConstants>,
    pub v_pri_norm: f64,
    pub v_dual_norm: f64,
}
