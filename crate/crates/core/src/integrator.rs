//! Fixed-step RK4 over one shooting interval, with forward (variational) and
//! reverse (discrete adjoint) sensitivities of the discrete scheme itself.
//!
//! Forward and adjoint products differentiate the same floating-point
//! recursion, so `seed^T * forward` and the adjoint sweep agree to rounding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Dynamics, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integration produced a non-finite state")]
    Blowup,
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {what} of length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub steps_per_interval: usize,
    /// Shooting interval length in seconds.
    pub interval_length: f64,
}

impl IntegratorConfig {
    pub fn new(steps_per_interval: usize, interval_length: f64) -> Result<Self, IntegratorError> {
        let cfg = Self { steps_per_interval, interval_length };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IntegratorError> {
        if self.steps_per_interval == 0 {
            return Err(IntegratorError::InvalidConfig("steps_per_interval must be at least 1".into()));
        }
        if !(self.interval_length.is_finite() && self.interval_length > 0.0) {
            return Err(IntegratorError::InvalidConfig("interval_length must be positive".into()));
        }
        Ok(())
    }

    /// Same interval, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self { steps_per_interval: self.steps_per_interval * factor.max(1), ..*self }
    }

    fn step(&self) -> f64 {
        self.interval_length / self.steps_per_interval as f64
    }
}

/// Jacobian of `phi` with respect to `(x0, u)`, plus a staleness flag.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBlock {
    pub value: DMatrix<f64>,
    pub stale: bool,
}

impl SensitivityBlock {
    pub fn fresh(value: DMatrix<f64>) -> Self {
        Self { value, stale: false }
    }
}

fn check_inputs(model: &dyn Dynamics, x0: &DVector<f64>, u: &DVector<f64>, cfg: &IntegratorConfig) -> Result<(), IntegratorError> {
    cfg.validate()?;
    if x0.len() != model.nx() {
        return Err(IntegratorError::Dimension { what: "state", expected: model.nx(), got: x0.len() });
    }
    if u.len() != model.nu() {
        return Err(IntegratorError::Dimension { what: "control", expected: model.nu(), got: u.len() });
    }
    Ok(())
}

fn finite(x: &DVector<f64>) -> Result<(), IntegratorError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IntegratorError::Blowup)
    }
}

fn rhs(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, IntegratorError> {
    model.rhs(x, u).map_err(|e| match e {
        ModelError::InvalidState { .. } => IntegratorError::Blowup,
        other => IntegratorError::Model(other),
    })
}

/// One RK4 step. Returns the new state and the four stage points.
fn rk4_step(
    model: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, [DVector<f64>; 4], [DVector<f64>; 4]), IntegratorError> {
    let z1 = x.clone();
    let k1 = rhs(model, &z1, u)?;
    let z2 = x + &k1 * (0.5 * h);
    let k2 = rhs(model, &z2, u)?;
    let z3 = x + &k2 * (0.5 * h);
    let k3 = rhs(model, &z3, u)?;
    let z4 = x + &k3 * h;
    let k4 = rhs(model, &z4, u)?;
    let next = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
    finite(&next)?;
    Ok((next, [z1, z2, z3, z4], [k1, k2, k3, k4]))
}

/// `phi(x0, u)`: the state after one shooting interval with `u` held constant.
pub fn integrate(
    model: &dyn Dynamics,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>, IntegratorError> {
    check_inputs(model, x0, u, cfg)?;
    let h = cfg.step();
    let mut x = x0.clone();
    for _ in 0..cfg.steps_per_interval {
        x = rk4_step(model, &x, u, h)?.0;
    }
    Ok(x)
}

/// `phi(x0, u)` together with its exact discrete Jacobian `[dphi/dx0 | dphi/du]`.
pub fn integrate_with_forward_sensitivity(
    model: &dyn Dynamics,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, SensitivityBlock), IntegratorError> {
    check_inputs(model, x0, u, cfg)?;
    let (nx, nu) = (model.nx(), model.nu());
    let h = cfg.step();
    let mut x = x0.clone();
    let mut s = DMatrix::zeros(nx, nx + nu);
    s.view_mut((0, 0), (nx, nx)).fill_with_identity();
    for _ in 0..cfg.steps_per_interval {
        let (next, z, _) = rk4_step(model, &x, u, h)?;
        let k1 = model.tangent(&z[0], u, &s)?;
        let k2 = model.tangent(&z[1], u, &(&s + &k1 * (0.5 * h)))?;
        let k3 = model.tangent(&z[2], u, &(&s + &k2 * (0.5 * h)))?;
        let k4 = model.tangent(&z[3], u, &(&s + &k3 * h))?;
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        x = next;
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(IntegratorError::Blowup);
    }
    Ok((x, SensitivityBlock::fresh(s)))
}

/// `seed^T [dphi/dx0 | dphi/du]` by a reverse sweep, returned as a column vector
/// of length `nx + nu`.
pub fn adjoint_directional_sensitivity(
    model: &dyn Dynamics,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &IntegratorConfig,
    seed: &DVector<f64>,
) -> Result<DVector<f64>, IntegratorError> {
    let (_, mut rows) = integrate_with_adjoints(model, x0, u, cfg, &[seed])?;
    Ok(rows.pop().expect("one seed"))
}

/// `phi(x0, u)` plus one adjoint product per seed, sharing the forward pass
/// and the Jacobian evaluations at every stage point.
pub fn integrate_with_adjoints(
    model: &dyn Dynamics,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &IntegratorConfig,
    seeds: &[&DVector<f64>],
) -> Result<(DVector<f64>, Vec<DVector<f64>>), IntegratorError> {
    check_inputs(model, x0, u, cfg)?;
    let (nx, nu) = (model.nx(), model.nu());
    for seed in seeds {
        if seed.len() != nx {
            return Err(IntegratorError::Dimension { what: "adjoint seed", expected: nx, got: seed.len() });
        }
    }
    let h = cfg.step();
    let mut x = x0.clone();
    let mut stages = Vec::with_capacity(cfg.steps_per_interval);
    for _ in 0..cfg.steps_per_interval {
        let (next, z, _) = rk4_step(model, &x, u, h)?;
        stages.push(z);
        x = next;
    }

    let mut xbar: Vec<DVector<f64>> = seeds.iter().map(|s| (*s).clone()).collect();
    let mut ubar: Vec<DVector<f64>> = vec![DVector::zeros(nu); seeds.len()];
    // weight of each stage slope in the update, and the coefficient feeding
    // stage j's point from stage j-1's slope
    let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
    let feed = [0.0, 0.5 * h, 0.5 * h, h];
    for z in stages.iter().rev() {
        let jacs = z
            .iter()
            .map(|zj| model.jacobian(zj, u))
            .collect::<Result<Vec<_>, _>>()?;
        for (xb, ub) in xbar.iter_mut().zip(ubar.iter_mut()) {
            let mut kbar: Vec<DVector<f64>> = weights.iter().map(|w| &*xb * *w).collect();
            let mut acc = xb.clone();
            for j in (0..4).rev() {
                let (jx, ju) = &jacs[j];
                let zbar = jx.tr_mul(&kbar[j]);
                *ub += ju.tr_mul(&kbar[j]);
                if j > 0 {
                    kbar[j - 1] += &zbar * feed[j];
                }
                acc += zbar;
            }
            *xb = acc;
        }
    }
    let rows = xbar
        .into_iter()
        .zip(ubar)
        .map(|(xb, ub)| {
            let mut row = DVector::zeros(nx + nu);
            row.rows_mut(0, nx).copy_from(&xb);
            row.rows_mut(nx, nu).copy_from(&ub);
            row
        })
        .collect::<Vec<_>>();
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(IntegratorError::Blowup);
    }
    Ok((x, rows))
}
