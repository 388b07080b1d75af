//! Fixtures and oracles shared by the integration test targets.
#![allow(dead_code)]

use cmon_rti::harness::pendulum_scenario;
use cmon_rti::integrator::{integrate, integrate_with_forward_sensitivity, IntegratorConfig};
use cmon_rti::models::{ChainParams, Dynamics};
use cmon_rti::perturbation::{build_bundle, vectorize};
use cmon_rti::qp::{DenseQp, QpSettings};
use cmon_rti::schemes::{Controller, SchemeConfig, SchemeKind};
use cmon_rti::transcription::{build_qp, solve_qp, Multipliers, NodeInput, Ocp, QpData, References, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `integrate` with respect to `(x0, u)`.
pub fn finite_difference_jacobian(model: &dyn Dynamics, x0: &DVector<f64>, u: &DVector<f64>, cfg: &IntegratorConfig, h: f64) -> DMatrix<f64> {
    let (nx, nu) = (model.nx(), model.nu());
    let mut jac = DMatrix::zeros(nx, nx + nu);
    for j in 0..nx + nu {
        let (mut xp, mut xm, mut up, mut um) = (x0.clone(), x0.clone(), u.clone(), u.clone());
        if j < nx {
            xp[j] += h;
            xm[j] -= h;
        } else {
            up[j - nx] += h;
            um[j - nx] -= h;
        }
        let fp = integrate(model, &xp, &up, cfg).unwrap();
        let fm = integrate(model, &xm, &um, cfg).unwrap();
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Largest entrywise error, relative to the entry or 1 when the entry is small.
pub fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn chain_point(offsets: &[f64], controls: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let params = ChainParams::default();
    let rest = params.equilibrium([1.0, 0.0, 0.0]).unwrap();
    let x0 = DVector::from_iterator(rest.len(), rest.iter().zip(offsets.iter().cycle()).map(|(r, o)| r + o));
    (x0, DVector::from_column_slice(controls))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Strictly convex QP with a known strictly feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> DenseQp {
    let n = rng.random_range(2..=8);
    let m_eq = rng.random_range(0..=2.min(n - 1));
    let m_in = rng.random_range(1..=6);
    let l = random_matrix(rng, n, n);
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = random_matrix(rng, n, 1).column(0).into_owned() * 3.0;
    let feasible = random_matrix(rng, n, 1).column(0).into_owned();
    let a = random_matrix(rng, m_eq, n);
    let b = -(&a * &feasible);
    let c_mat = random_matrix(rng, m_in, n);
    let slack = DVector::from_fn(m_in, |_, _| rng.random_range(0.05..0.5));
    let c = -(&c_mat * &feasible) - slack;
    DenseQp { h, g, a, b, c_mat, c }
}

pub struct Enumerated {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

/// Tries every active set: solves the equality-reduced KKT system and keeps
/// the candidate that is primal feasible with nonnegative multipliers.
pub fn enumerate_active_sets(qp: &DenseQp) -> Enumerated {
    let (n, m_eq, m_in) = (qp.g.len(), qp.b.len(), qp.c.len());
    let mut found: Option<Enumerated> = None;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|j| mask & (1 << j) != 0).collect();
        let k = m_eq + active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        rhs.rows_mut(0, n).copy_from(&-&qp.g);
        for i in 0..m_eq {
            kkt.view_mut((n + i, 0), (1, n)).copy_from(&qp.a.row(i));
            kkt.view_mut((0, n + i), (n, 1)).copy_from(&qp.a.row(i).transpose());
            rhs[n + i] = -qp.b[i];
        }
        for (r, &j) in active.iter().enumerate() {
            let i = n + m_eq + r;
            kkt.view_mut((i, 0), (1, n)).copy_from(&qp.c_mat.row(j));
            kkt.view_mut((0, i), (n, 1)).copy_from(&qp.c_mat.row(j).transpose());
            rhs[i] = -qp.c[j];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let y = sol.rows(n, m_eq).into_owned();
        let mut z = DVector::zeros(m_in);
        for (r, &j) in active.iter().enumerate() {
            z[j] = sol[n + m_eq + r];
        }
        let primal_ok = (&qp.c_mat * &x + &qp.c).iter().all(|v| *v <= 1e-10);
        let dual_ok = z.iter().all(|v| *v >= -1e-10);
        if primal_ok && dual_ok {
            found = Some(Enumerated { x, y, z });
            break;
        }
    }
    found.expect("a strictly convex feasible QP has a KKT point")
}

/// Pendulum QP data after one RTI step, tracking a cart position beyond the
/// bound so that multipliers and active rows are nonzero.
pub struct Instance {
    pub ocp: Ocp,
    pub traj: Trajectory,
    pub mult: Multipliers,
    pub x_hat: DVector<f64>,
    pub refs: References,
    pub phi: Vec<DVector<f64>>,
    pub blocks: Vec<DMatrix<f64>>,
    pub adjoint: Vec<DVector<f64>>,
}

pub fn instance(horizon: usize) -> Instance {
    let cfg = pendulum_scenario(horizon, SchemeKind::Rti);
    let ocp = cfg.ocp().unwrap();
    let x_hat = DVector::from_vec(vec![0.8, 0.2, 1.5, 0.0]);
    let refs = References::constant(&DVector::from_vec(vec![1.5, 0.0, 0.0, 0.0]), &DVector::zeros(1), horizon);
    let traj = Trajectory::constant(&x_hat, &DVector::zeros(1), horizon);
    let mut ctrl = Controller::new(ocp.clone(), SchemeConfig::new(SchemeKind::Rti), traj, Multipliers::zeros(&ocp)).unwrap();
    ctrl.step(&x_hat, &refs).unwrap();
    let (traj, mult) = (ctrl.traj.clone(), ctrl.mult.clone());
    let dynamics = ocp.model.dynamics.clone();
    let (mut phi, mut blocks) = (Vec::new(), Vec::new());
    for k in 0..horizon {
        let (p, b) = integrate_with_forward_sensitivity(dynamics.as_ref(), &traj.x[k], &traj.u[k], &ocp.integrator).unwrap();
        phi.push(p);
        blocks.push(b.value);
    }
    let adjoint = (0..horizon).map(|k| blocks[k].tr_mul(&mult.lambda[k + 1])).collect();
    Instance { ocp, traj, mult, x_hat, refs, phi, blocks, adjoint }
}

impl Instance {
    /// QP with Jacobian blocks `J + P` in the constraints and the exact
    /// Lagrangian gradient.
    pub fn qp(&self, perturbation: Option<&[DMatrix<f64>]>) -> QpData {
        let n = self.ocp.horizon;
        let jac: Vec<DMatrix<f64>> = match perturbation {
            Some(p) => (0..n).map(|k| &self.blocks[k] + &p[k]).collect(),
            None => self.blocks.clone(),
        };
        let inputs: Vec<NodeInput<'_>> =
            (0..n).map(|k| NodeInput { phi: &self.phi[k], jacobian: &jac[k], adjoint: &self.adjoint[k] }).collect();
        build_qp(&self.ocp, &self.traj, &self.mult, &self.x_hat, &self.refs, &inputs).unwrap()
    }
}

pub fn random_blocks(rng: &mut ChaCha8Rng, count: usize, nx: usize, nz: usize) -> Vec<DMatrix<f64>> {
    (0..count).map(|_| DMatrix::from_fn(nx, nz, |_, _| rng.random_range(-1.0..1.0))).collect()
}

pub const TIGHT: QpSettings = QpSettings { tol: 1e-11, max_iter: 200 };

/// Log-log slope of the error of the first-order prediction
/// `dy(0) + M^{-1} N p` against the perturbed QP solution, for `p = t P` with a
/// fixed random direction `P`.
pub fn prediction_error_slope(inst: &Instance, scales: &[f64]) -> (f64, Vec<(f64, f64)>) {
    let exact = inst.qp(None);
    let (sol, step0) = solve_qp(&exact, &TIGHT).unwrap();
    let bundle = build_bundle(&exact, &sol, &step0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let direction = random_blocks(&mut rng, inst.ocp.horizon, inst.ocp.nx(), inst.ocp.nx() + inst.ocp.nu());
    let slope_dir = bundle.m.clone().lu().solve(&(&bundle.n * vectorize(&direction))).unwrap();
    let mut points = Vec::new();
    for &t in scales {
        let p: Vec<DMatrix<f64>> = direction.iter().map(|b| b * t).collect();
        let (sol_t, step_t) = solve_qp(&inst.qp(Some(&p)), &TIGHT).unwrap();
        assert_eq!(sol_t.active_set, sol.active_set, "active set changed at t = {t}");
        let predicted = step0.stacked() + &slope_dir * t;
        points.push((t, (step_t.stacked() - predicted).norm()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(t, r)| (t.ln(), r.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    (slope, points)
}
