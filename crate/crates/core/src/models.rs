//! Dynamic-system abstraction and the two benchmark plants.
//!
//! A [`ModelSpec`] bundles an ODE right-hand side, the path and terminal
//! inequality constraints (feasible iff `<= 0`) and the diagonal weights of
//! the quadratic tracking cost
//!
//! ```text
//! h_k = 1/2 |x_k - x_ref|^2_Q + 1/2 |u_k - u_ref|^2_R,    h_N = 1/2 |x_N - x_ref|^2_QN
//! ```

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite state or control passed to {model}")]
    InvalidState { model: &'static str },
    #[error("masses {first} and {second} coincide; spring force is singular")]
    SingularGeometry { first: usize, second: usize },
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("equilibrium search did not converge (residual {residual:.3e})")]
    EquilibriumNotFound { residual: f64 },
}

/// Explicit ODE `xdot = f(x, u)`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// Analytic Jacobians `(df/dx, df/du)`.
    fn jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError>;

    /// Directional product `df/dx * z + [0 | df/du]` for an `nx x (nx + nu)`
    /// seed matrix `z`. Models with sparse Jacobians override this.
    fn tangent(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        let nx = self.nx();
        let (jx, ju) = self.jacobian(x, u)?;
        let mut out = &jx * z;
        let mut tail = out.columns_mut(nx, self.nu());
        tail += ju;
        Ok(out)
    }
}

/// Vector-valued inequality `g(z) <= 0`, with `z = (x, u)` for path
/// constraints and `z = x` for terminal constraints.
pub trait Constraint: Send + Sync + fmt::Debug {
    fn len(&self) -> usize;
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Simple bounds on selected entries of `z`. Each finite bound yields one row:
/// `z_i - upper <= 0` followed by `lower - z_i <= 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub entries: Vec<Bound>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

impl BoxBounds {
    pub fn none() -> Self {
        Self::default()
    }

    /// `|z_i| <= limit` for every index in `indices`.
    pub fn symmetric(indices: impl IntoIterator<Item = usize>, limit: f64) -> Self {
        Self {
            entries: indices
                .into_iter()
                .map(|index| Bound { index, lower: -limit, upper: limit })
                .collect(),
        }
    }

    fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        // (index, sign, offset): row value = sign * z_index + offset
        self.entries.iter().flat_map(|b| {
            let up = b.upper.is_finite().then_some((b.index, 1.0, -b.upper));
            let lo = b.lower.is_finite().then_some((b.index, -1.0, b.lower));
            up.into_iter().chain(lo)
        })
    }
}

impl Constraint for BoxBounds {
    fn len(&self) -> usize {
        self.rows().count()
    }

    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.rows().map(|(i, s, o)| s * z[i] + o))
    }

    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.len(), z.len());
        for (row, (i, s, _)) in self.rows().enumerate() {
            jac[(row, i)] = s;
        }
        jac
    }
}

/// Dynamics, constraints and tracking weights of one optimal control problem.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dynamics: Arc<dyn Dynamics>,
    pub path_constraint: Arc<dyn Constraint>,
    /// Constraint on stage 0 instead of `path_constraint`. The initial state
    /// is fixed by the measurement, so state bounds there can only make the
    /// problem infeasible.
    pub initial_constraint: Option<Arc<dyn Constraint>>,
    pub terminal_constraint: Arc<dyn Constraint>,
    /// Diagonal of `blkdiag(Q, R)`, length `nx + nu`.
    pub stage_weights: DVector<f64>,
    /// Diagonal of `Q_N`, length `nx`.
    pub terminal_weights: DVector<f64>,
}

impl ModelSpec {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        path_constraint: Arc<dyn Constraint>,
        terminal_constraint: Arc<dyn Constraint>,
        stage_weights: DVector<f64>,
        terminal_weights: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let spec = Self { dynamics, path_constraint, initial_constraint: None, terminal_constraint, stage_weights, terminal_weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_initial_constraint(mut self, constraint: Arc<dyn Constraint>) -> Self {
        self.initial_constraint = Some(constraint);
        self
    }

    /// Constraint applied to stage `k < N`.
    pub fn stage_constraint(&self, k: usize) -> &dyn Constraint {
        match (&self.initial_constraint, k) {
            (Some(c), 0) => c.as_ref(),
            _ => self.path_constraint.as_ref(),
        }
    }

    pub fn nx(&self) -> usize {
        self.dynamics.nx()
    }

    pub fn nu(&self) -> usize {
        self.dynamics.nu()
    }

    /// Number of constraint rows at stage `k < N`.
    pub fn n_stage(&self, k: usize) -> usize {
        self.stage_constraint(k).len()
    }

    pub fn n_terminal(&self) -> usize {
        self.terminal_constraint.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (nx, nu) = (self.nx(), self.nu());
        if self.stage_weights.len() != nx + nu {
            return Err(ModelError::InvalidSpec(format!(
                "stage weights have length {}, expected {}",
                self.stage_weights.len(),
                nx + nu
            )));
        }
        if self.terminal_weights.len() != nx {
            return Err(ModelError::InvalidSpec(format!(
                "terminal weights have length {}, expected {nx}",
                self.terminal_weights.len()
            )));
        }
        let all = self.stage_weights.iter().chain(self.terminal_weights.iter());
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ModelError::InvalidSpec("weights must be finite and nonnegative".into()));
        }
        if all.clone().all(|w| *w == 0.0) {
            return Err(ModelError::InvalidSpec("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

fn check_finite(model: &'static str, values: &[&DVector<f64>]) -> Result<(), ModelError> {
    if values.iter().all(|v| v.iter().all(|x| x.is_finite())) {
        Ok(())
    } else {
        Err(ModelError::InvalidState { model })
    }
}

/// Linear time-invariant system `xdot = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(ModelError::InvalidSpec("A must be square and B must have matching rows".into()));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearSystem {
    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_finite("linear", &[x, u])?;
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_finite("linear", &[x, u])?;
        Ok((self.a.clone(), self.b.clone()))
    }
}

// ---------------------------------------------------------------------------
// Inverted pendulum on a cart
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Pendulum mass [kg].
    pub m1: f64,
    /// Cart mass [kg].
    pub m2: f64,
    /// Rod length [m].
    pub l: f64,
    /// Gravity [m/s^2].
    pub g: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { m1: 0.1, m2: 1.0, l: 0.8, g: 9.81 }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if [self.m1, self.m2, self.l, self.g].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec("pendulum parameters must be strictly positive".into()))
        }
    }
}

/// Cart-pendulum ODE. State `(p, theta, pdot, thetadot)` with `theta = 0`
/// upright; control is the horizontal force on the cart.
pub fn pendulum_rhs(state: &DVector<f64>, force: f64, params: &PendulumParams) -> Result<DVector<f64>, ModelError> {
    if state.len() != 4 || !state.iter().all(|v| v.is_finite()) || !force.is_finite() {
        return Err(ModelError::InvalidState { model: "pendulum" });
    }
    let PendulumParams { m1, m2, l, g } = *params;
    let (s, c) = state[1].sin_cos();
    let w = state[3];
    // m2 + m1 - m1 cos^2 = m2 + m1 sin^2 >= m2
    let den = m2 + m1 * s * s;
    let pdd = (-m1 * l * s * w * w + m1 * g * c * s + force) / den;
    let tdd = (force * c - m1 * l * c * s * w * w + (m2 + m1) * g * s) / (l * den);
    Ok(DVector::from_vec(vec![state[2], state[3], pdd, tdd]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Dynamics for Pendulum {
    fn nx(&self) -> usize {
        4
    }

    fn nu(&self) -> usize {
        1
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        pendulum_rhs(x, u[0], &self.params)
    }

    fn jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_finite("pendulum", &[x, u])?;
        let PendulumParams { m1, m2, l, g } = self.params;
        let f = u[0];
        let (s, c) = x[1].sin_cos();
        let w = x[3];
        let w2 = w * w;
        let den = m2 + m1 * s * s;
        let dden = 2.0 * m1 * s * c;

        let num1 = -m1 * l * s * w2 + m1 * g * c * s + f;
        let num1_th = -m1 * l * c * w2 + m1 * g * (c * c - s * s);
        let num1_w = -2.0 * m1 * l * s * w;

        let num2 = f * c - m1 * l * c * s * w2 + (m2 + m1) * g * s;
        let num2_th = -f * s - m1 * l * (c * c - s * s) * w2 + (m2 + m1) * g * c;
        let num2_w = -2.0 * m1 * l * c * s * w;

        let mut jx = DMatrix::zeros(4, 4);
        jx[(0, 2)] = 1.0;
        jx[(1, 3)] = 1.0;
        jx[(2, 1)] = (num1_th * den - num1 * dden) / (den * den);
        jx[(2, 3)] = num1_w / den;
        jx[(3, 1)] = (num2_th * den - num2 * dden) / (l * den * den);
        jx[(3, 3)] = num2_w / (l * den);

        let ju = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / den, c / (l * den)]);
        Ok((jx, ju))
    }
}

// ---------------------------------------------------------------------------
// Chain of masses with nonlinear springs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    /// Number of masses, counting the controlled free end but not the wall anchor.
    pub n: usize,
    /// Mass of each intermediate body [kg].
    pub m: f64,
    /// Linear spring constant.
    pub d: f64,
    /// Cubic spring constant.
    pub d1: f64,
    /// Spring rest length [m].
    pub rest_length: f64,
    /// Gravity acceleration vector.
    pub gravity: [f64; 3],
    /// Fixed position of the anchor mass.
    pub wall_anchor: [f64; 3],
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            n: 5,
            m: 0.45,
            d: 1.0,
            d1: 0.1,
            rest_length: 0.33,
            gravity: [0.0, 0.0, -9.81],
            wall_anchor: [0.0, 0.0, 0.0],
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [self.m, self.d, self.d1, self.rest_length].iter().all(|v| v.is_finite() && *v > 0.0);
        if self.n >= 3 && positive {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec("chain needs n >= 3 and positive m, D, D1, L".into()))
        }
    }

    /// State dimension `6(n-1) + 3`.
    pub fn nx(&self) -> usize {
        6 * (self.n - 1) + 3
    }

    fn anchor(&self) -> Vector3<f64> {
        Vector3::from(self.wall_anchor)
    }

    fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Spring force pulling mass `i` back towards mass `i - 1`, given
    /// `delta = p_i - p_{i-1}`.
    fn spring_force(&self, delta: &Vector3<f64>) -> Option<Vector3<f64>> {
        let dist = delta.norm();
        if dist == 0.0 {
            return None;
        }
        let stretch = dist - self.rest_length;
        let scale = self.d * (1.0 - self.rest_length / dist) + self.d1 * stretch.powi(3) / dist;
        Some(delta * scale)
    }

    /// Derivative of [`Self::spring_force`] with respect to `delta`.
    fn spring_force_jacobian(&self, delta: &Vector3<f64>) -> Matrix3<f64> {
        let dist = delta.norm();
        let stretch = dist - self.rest_length;
        let scale = self.d * (1.0 - self.rest_length / dist) + self.d1 * stretch.powi(3) / dist;
        let dscale = self.d * self.rest_length / (dist * dist)
            + self.d1 * (3.0 * stretch * stretch * dist - stretch.powi(3)) / (dist * dist);
        Matrix3::identity() * scale + delta * delta.transpose() * (dscale / dist)
    }

    /// Position of mass `i` (1-based; 0 is the anchor) in state `x`.
    fn position(&self, x: &DVector<f64>, i: usize) -> Vector3<f64> {
        if i == 0 {
            self.anchor()
        } else {
            Vector3::new(x[3 * (i - 1)], x[3 * (i - 1) + 1], x[3 * (i - 1) + 2])
        }
    }

    /// Offset of the velocity of intermediate mass `i` (1-based).
    fn velocity_offset(&self, i: usize) -> usize {
        3 * self.n + 3 * (i - 1)
    }

    fn spring_deltas(&self, x: &DVector<f64>) -> Result<Vec<Vector3<f64>>, ModelError> {
        (1..=self.n)
            .map(|i| {
                let delta = self.position(x, i) - self.position(x, i - 1);
                if delta.norm() == 0.0 {
                    Err(ModelError::SingularGeometry { first: i - 1, second: i })
                } else {
                    Ok(delta)
                }
            })
            .collect()
    }

    /// Static equilibrium with the free end held at `free_end` and all
    /// velocities zero. Newton iteration with continuation in gravity,
    /// starting from the evenly spaced straight chain.
    pub fn equilibrium(&self, free_end: [f64; 3]) -> Result<DVector<f64>, ModelError> {
        self.validate()?;
        let n = self.n;
        let anchor = self.anchor();
        let end = Vector3::from(free_end);
        let m = n - 1;
        let mut pos = DVector::zeros(3 * m);
        for i in 1..n {
            let p = anchor + (end - anchor) * (i as f64 / n as f64);
            pos.fixed_rows_mut::<3>(3 * (i - 1)).copy_from(&p);
        }
        let full_state = |pos: &DVector<f64>| {
            let mut x = DVector::zeros(self.nx());
            x.rows_mut(0, 3 * m).copy_from(pos);
            x.fixed_rows_mut::<3>(3 * m).copy_from(&end);
            x
        };
        let steps = 20;
        let mut residual = f64::INFINITY;
        for step in 1..=steps {
            let mut scaled = *self;
            let fraction = step as f64 / steps as f64;
            scaled.gravity = [self.gravity[0] * fraction, self.gravity[1] * fraction, self.gravity[2] * fraction];
            for _ in 0..50 {
                let x = full_state(&pos);
                let u = DVector::zeros(3);
                let f = chain_rhs(&x, &u, &scaled)?;
                let (jx, _) = Chain { params: scaled }.jacobian(&x, &u)?;
                // Accelerations of intermediate masses as a function of their positions.
                let off = self.velocity_offset(1);
                let accel = f.rows(off, 3 * m).into_owned();
                residual = accel.amax();
                if residual < 1e-12 {
                    break;
                }
                let jac = jx.view((off, 0), (3 * m, 3 * m)).into_owned();
                let step = jac
                    .lu()
                    .solve(&(-&accel))
                    .ok_or(ModelError::EquilibriumNotFound { residual })?;
                pos += step;
            }
        }
        if residual > 1e-9 {
            return Err(ModelError::EquilibriumNotFound { residual });
        }
        Ok(full_state(&pos))
    }
}

/// Chain-of-masses ODE. State layout: positions `p_1 .. p_n` (free end last),
/// then velocities `v_1 .. v_{n-1}`. The control is the free-end velocity.
pub fn chain_rhs(state: &DVector<f64>, control: &DVector<f64>, params: &ChainParams) -> Result<DVector<f64>, ModelError> {
    let n = params.n;
    if state.len() != params.nx() || control.len() != 3 {
        return Err(ModelError::InvalidSpec("chain state/control dimension mismatch".into()));
    }
    check_finite("chain", &[state, control])?;
    let deltas = params.spring_deltas(state)?;
    let forces: Vec<Vector3<f64>> = deltas
        .iter()
        .map(|d| params.spring_force(d).expect("nonzero spring length"))
        .collect();
    let gravity = params.gravity();
    let mut out = DVector::zeros(state.len());
    for i in 1..n {
        let v = params.velocity_offset(i);
        for a in 0..3 {
            out[3 * (i - 1) + a] = state[v + a];
        }
        // forces[i - 1] is F_i (spring between i-1 and i), forces[i] is F_{i+1}
        let acc = (forces[i] - forces[i - 1]) / params.m + gravity;
        out.fixed_rows_mut::<3>(v).copy_from(&acc);
    }
    out.fixed_rows_mut::<3>(3 * (n - 1)).copy_from(&control.fixed_rows::<3>(0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chain {
    pub params: ChainParams,
}

impl Chain {
    pub fn new(params: ChainParams) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Per-mass blocks of the acceleration Jacobian: for intermediate mass `i`,
    /// `(d a_i / d p_{i-1}, d a_i / d p_i, d a_i / d p_{i+1})`.
    fn acceleration_blocks(&self, x: &DVector<f64>) -> Result<Vec<[Matrix3<f64>; 3]>, ModelError> {
        let p = &self.params;
        let deltas = p.spring_deltas(x)?;
        let jacs: Vec<Matrix3<f64>> = deltas.iter().map(|d| p.spring_force_jacobian(d)).collect();
        let inv_m = 1.0 / p.m;
        Ok((1..p.n)
            .map(|i| {
                let (ji, jn) = (&jacs[i - 1], &jacs[i]);
                [ji * inv_m, -(ji + jn) * inv_m, jn * inv_m]
            })
            .collect())
    }
}

impl Dynamics for Chain {
    fn nx(&self) -> usize {
        self.params.nx()
    }

    fn nu(&self) -> usize {
        3
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        chain_rhs(x, u, &self.params)
    }

    fn jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_finite("chain", &[x, u])?;
        let p = &self.params;
        let n = p.n;
        let nx = p.nx();
        let blocks = self.acceleration_blocks(x)?;
        let mut jx = DMatrix::zeros(nx, nx);
        for i in 1..n {
            let v = p.velocity_offset(i);
            for a in 0..3 {
                jx[(3 * (i - 1) + a, v + a)] = 1.0;
            }
            let [prev, own, next] = &blocks[i - 1];
            if i > 1 {
                jx.view_mut((v, 3 * (i - 2)), (3, 3)).copy_from(prev);
            }
            jx.view_mut((v, 3 * (i - 1)), (3, 3)).copy_from(own);
            jx.view_mut((v, 3 * i), (3, 3)).copy_from(next);
        }
        let mut ju = DMatrix::zeros(nx, 3);
        for a in 0..3 {
            ju[(3 * (n - 1) + a, a)] = 1.0;
        }
        Ok((jx, ju))
    }

    fn tangent(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        check_finite("chain", &[x, u])?;
        let p = &self.params;
        let n = p.n;
        let nx = p.nx();
        let blocks = self.acceleration_blocks(x)?;
        let mut out = DMatrix::zeros(nx, z.ncols());
        for i in 1..n {
            let v = p.velocity_offset(i);
            out.rows_mut(3 * (i - 1), 3).copy_from(&z.rows(v, 3));
            let [prev, own, next] = &blocks[i - 1];
            let mut acc = own * z.fixed_rows::<3>(3 * (i - 1));
            if i > 1 {
                acc += prev * z.fixed_rows::<3>(3 * (i - 2));
            }
            acc += next * z.fixed_rows::<3>(3 * i);
            out.rows_mut(v, 3).copy_from(&acc);
        }
        for a in 0..3 {
            out[(3 * (n - 1) + a, nx + a)] += 1.0;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fd_jacobian(model: &dyn Dynamics, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (nx, nu) = (model.nx(), model.nu());
        let h = 1e-6;
        let mut jac = DMatrix::zeros(nx, nx + nu);
        for j in 0..nx + nu {
            let (mut xp, mut up, mut xm, mut um) = (x.clone(), u.clone(), x.clone(), u.clone());
            if j < nx {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - nx] += h;
                um[j - nx] -= h;
            }
            let col = (model.rhs(&xp, &up).unwrap() - model.rhs(&xm, &um).unwrap()) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    #[test]
    fn pendulum_equilibria() {
        let p = PendulumParams::default();
        let up = pendulum_rhs(&DVector::zeros(4), 0.0, &p).unwrap();
        assert_eq!(up, DVector::zeros(4));
        let down = pendulum_rhs(&DVector::from_vec(vec![0.0, PI, 0.0, 0.0]), 0.0, &p).unwrap();
        assert!(down.amax() < 1e-13);
    }

    #[test]
    fn pendulum_matches_hand_transcription() {
        // Separate transcription of the cart-pendulum equations.
        let (m1, m2, l, g) = (0.1, 1.0, 0.8, 9.81);
        let (pos, th, v, w, f): (f64, f64, f64, f64, f64) = (0.1, 0.5, -0.2, 0.3, 2.0);
        let _ = pos;
        let d = m2 + m1 - m1 * th.cos().powi(2);
        let pdd = (-m1 * l * th.sin() * w.powi(2) + m1 * g * th.cos() * th.sin() + f) / d;
        let tdd = (f * th.cos() - m1 * l * th.cos() * th.sin() * w.powi(2) + (m2 + m1) * g * th.sin()) / (l * d);
        let out = pendulum_rhs(&DVector::from_vec(vec![0.1, 0.5, -0.2, 0.3]), 2.0, &PendulumParams::default()).unwrap();
        let expected = [v, w, pdd, tdd];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn pendulum_denominator_bounded_below() {
        let p = PendulumParams::default();
        for i in 0..=1000 {
            let th = -2.0 * PI + 4.0 * PI * i as f64 / 1000.0;
            let den = p.m2 + p.m1 - p.m1 * th.cos().powi(2);
            assert!(den >= p.m2 - 1e-15);
        }
    }

    #[test]
    fn pendulum_rejects_non_finite() {
        let x = DVector::from_vec(vec![0.0, f64::NAN, 0.0, 0.0]);
        assert!(matches!(
            pendulum_rhs(&x, 0.0, &PendulumParams::default()),
            Err(ModelError::InvalidState { .. })
        ));
        assert!(pendulum_rhs(&DVector::zeros(4), f64::INFINITY, &PendulumParams::default()).is_err());
    }

    #[test]
    fn pendulum_jacobian_matches_finite_differences() {
        let model = Pendulum::new(PendulumParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.3, 2.1, -0.7, 1.3]);
        let u = DVector::from_vec(vec![3.5]);
        let (jx, ju) = model.jacobian(&x, &u).unwrap();
        let fd = fd_jacobian(&model, &x, &u);
        let mut analytic = DMatrix::zeros(4, 5);
        analytic.columns_mut(0, 4).copy_from(&jx);
        analytic.columns_mut(4, 1).copy_from(&ju);
        assert!((analytic - fd).amax() < 1e-8);
    }

    fn chain_state(params: &ChainParams, seed: u64) -> DVector<f64> {
        // deterministic pseudo-random configuration with well separated masses
        let nx = params.nx();
        let mut x = DVector::zeros(nx);
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 1..=params.n {
            x[3 * (i - 1)] = 0.6 * i as f64 + 0.1 * next();
            x[3 * (i - 1) + 1] = 0.1 * next();
            x[3 * (i - 1) + 2] = -0.3 * i as f64 + 0.1 * next();
        }
        for j in 3 * params.n..nx {
            x[j] = next();
        }
        x
    }

    #[test]
    fn chain_rest_length_spring_is_force_free() {
        let params = ChainParams { gravity: [0.0; 3], n: 3, ..ChainParams::default() };
        let l = params.rest_length;
        // masses along x-axis exactly one rest length apart, at rest
        let mut x = DVector::zeros(params.nx());
        for i in 1..=3 {
            x[3 * (i - 1)] = l * i as f64;
        }
        let f = chain_rhs(&x, &DVector::zeros(3), &params).unwrap();
        assert!(f.amax() < 1e-14);
        assert_eq!(params.spring_force(&Vector3::new(0.0, l, 0.0)).unwrap(), Vector3::zeros());
    }

    #[test]
    fn chain_coincident_masses_error() {
        let params = ChainParams::default();
        let mut x = chain_state(&params, 3);
        let (a, b) = (x.fixed_rows::<3>(3).into_owned(), 0);
        let _ = b;
        x.fixed_rows_mut::<3>(0).copy_from(&a);
        assert_eq!(
            chain_rhs(&x, &DVector::zeros(3), &params),
            Err(ModelError::SingularGeometry { first: 1, second: 2 })
        );
    }

    #[test]
    fn chain_matches_second_transcription() {
        // Independent element-wise transcription of the spring forces.
        let params = ChainParams::default();
        let x = chain_state(&params, 11);
        let u = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        let n = params.n;
        let pos = |i: usize| -> [f64; 3] {
            if i == 0 {
                params.wall_anchor
            } else {
                [x[3 * i - 3], x[3 * i - 2], x[3 * i - 1]]
            }
        };
        let force = |i: usize| -> [f64; 3] {
            let (a, b) = (pos(i), pos(i - 1));
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let nrm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let lin = params.d * (1.0 - params.rest_length / nrm);
            let cub = params.d1 * (nrm - params.rest_length).powi(3) / nrm;
            [d[0] * (lin + cub), d[1] * (lin + cub), d[2] * (lin + cub)]
        };
        let out = chain_rhs(&x, &u, &params).unwrap();
        for i in 1..n {
            let (fi, fn_) = (force(i), force(i + 1));
            for a in 0..3 {
                let vel = x[3 * n + 3 * (i - 1) + a];
                assert!((out[3 * (i - 1) + a] - vel).abs() < 1e-14);
                let acc = (fn_[a] - fi[a]) / params.m + params.gravity[a];
                assert!((out[3 * n + 3 * (i - 1) + a] - acc).abs() < 1e-12);
            }
        }
        for a in 0..3 {
            assert_eq!(out[3 * (n - 1) + a], u[a]);
        }
    }

    #[test]
    fn chain_jacobian_and_tangent_match_finite_differences() {
        let params = ChainParams::default();
        let model = Chain::new(params).unwrap();
        let x = chain_state(&params, 5);
        let u = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        let fd = fd_jacobian(&model, &x, &u);
        let (jx, ju) = model.jacobian(&x, &u).unwrap();
        let nx = params.nx();
        assert!((&jx - fd.columns(0, nx)).amax() < 1e-6);
        assert!((&ju - fd.columns(nx, 3)).amax() < 1e-6);

        let z = DMatrix::from_fn(nx, nx + 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let sparse = model.tangent(&x, &u, &z).unwrap();
        let mut dense = &jx * &z;
        let mut tail = dense.columns_mut(nx, 3);
        tail += &ju;
        assert!((sparse - dense).amax() < 1e-12);
    }

    #[test]
    fn chain_translation_leaves_forces_unchanged() {
        let params = ChainParams { gravity: [0.0; 3], ..ChainParams::default() };
        let x = chain_state(&params, 17);
        let shift = Vector3::new(0.7, -1.1, 0.4);
        let shifted_params = ChainParams {
            wall_anchor: [shift.x, shift.y, shift.z],
            ..params
        };
        let mut xs = x.clone();
        for i in 0..params.n {
            let mut p = xs.fixed_rows_mut::<3>(3 * i);
            p += shift;
        }
        let u = DVector::zeros(3);
        let a = chain_rhs(&x, &u, &params).unwrap();
        let b = chain_rhs(&xs, &u, &shifted_params).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn box_bounds_rows() {
        let b = BoxBounds { entries: vec![Bound { index: 1, lower: -2.0, upper: 3.0 }, Bound { index: 0, lower: f64::NEG_INFINITY, upper: 1.0 }] };
        assert_eq!(b.len(), 3);
        let z = DVector::from_vec(vec![0.5, 1.0]);
        assert_eq!(b.eval(&z).as_slice(), &[-2.0, -3.0, -0.5]);
        let j = b.jacobian(&z);
        assert_eq!(j[(0, 1)], 1.0);
        assert_eq!(j[(1, 1)], -1.0);
        assert_eq!(j[(2, 0)], 1.0);
    }

    #[test]
    fn spec_validation() {
        let dyn_: Arc<dyn Dynamics> = Arc::new(Pendulum::new(PendulumParams::default()).unwrap());
        let none: Arc<dyn Constraint> = Arc::new(BoxBounds::none());
        assert!(ModelSpec::new(dyn_.clone(), none.clone(), none.clone(), DVector::zeros(5), DVector::zeros(4)).is_err());
        assert!(ModelSpec::new(dyn_.clone(), none.clone(), none.clone(), DVector::from_element(5, -1.0), DVector::zeros(4)).is_err());
        assert!(ModelSpec::new(dyn_, none.clone(), none, DVector::from_element(5, 1.0), DVector::zeros(4)).is_ok());
        assert!(PendulumParams { m1: 0.0, ..Default::default() }.validate().is_err());
        assert!(ChainParams { n: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn chain_equilibrium_is_stationary() {
        let params = ChainParams::default();
        let x = params.equilibrium([1.0, 0.0, 0.0]).unwrap();
        let f = chain_rhs(&x, &DVector::zeros(3), &params).unwrap();
        assert!(f.amax() < 1e-9, "{}", f.amax());
        // the chain sags below the anchor-to-end line
        assert!(x[2] < 0.0);
    }
}
