//! Real-time iteration controllers and the CMoN-SQP solver.
//!
//! Every scheme performs one QP step per call to [`Controller::step`]. They
//! differ only in which Jacobian blocks are recomputed:
//!
//! - `Rti`: all blocks, every iteration.
//! - `MlRti { interval: m }`: all blocks every `m`-th iteration, none otherwise.
//! - `AdjRti`: blocks computed once (at iteration 0 or at a supplied
//!   trajectory) and never again.
//! - `CmonRti`: blocks whose primal or adjoint CMoN exceeds the current
//!   threshold.
//!
//! Stale blocks are always paired with the exact adjoint product
//! `lambda^T grad phi_k` in the QP gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmon::{
    compute_thresholds, dto_tolerance, dual_cmon, primal_cmon, update_decision, CmonSettings, CmonState, SensitivityStore,
    ThresholdConstants,
};
use crate::integrator::{integrate_with_adjoints, integrate_with_forward_sensitivity, IntegratorError, SensitivityBlock};
use crate::perturbation::{build_m, measure_dto, perturbation_size, rho_gamma, DtoRecord, PerturbationError};
use crate::qp::QpSettings;
use crate::transcription::{
    apply_step, build_qp, kkt_residual, solve_qp, Multipliers, NodeInput, Ocp, QpStep, References,
    Trajectory, TranscriptionError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("SQP diverged: KKT residual grew for {consecutive} consecutive iterations")]
    Divergence { consecutive: usize, log: Vec<SqpIteration> },
}

impl From<IntegratorError> for SchemeError {
    fn from(e: IntegratorError) -> Self {
        SchemeError::Transcription(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    Rti,
    MlRti { interval: usize },
    AdjRti,
    CmonRti,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Rti => "rti",
            SchemeKind::MlRti { .. } => "ml_rti",
            SchemeKind::AdjRti => "adj_rti",
            SchemeKind::CmonRti => "cmon_rti",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    #[serde(default)]
    pub cmon: CmonSettings,
    /// Solve the exact-Jacobian QP every iteration and record the distance.
    #[serde(default)]
    pub dto_oracle: bool,
    /// With the oracle on, also evaluate the first-order bound with a
    /// per-iteration `rho` (dense SVD, expensive).
    #[serde(default)]
    pub per_instant_rho: bool,
    /// Record the exact KKT residual after every step.
    #[serde(default = "default_true")]
    pub log_kkt: bool,
    #[serde(default)]
    pub qp: QpSettings,
}

fn default_true() -> bool {
    true
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind) -> Self {
        Self { kind, cmon: CmonSettings::default(), dto_oracle: false, per_instant_rho: false, log_kkt: true, qp: QpSettings::default() }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if let SchemeKind::MlRti { interval } = self.kind {
            if interval == 0 {
                return Err(SchemeError::Config("ML-RTI interval must be at least 1".into()));
            }
        }
        self.cmon.validate().map_err(SchemeError::Config)?;
        if !(self.qp.tol > 0.0) || self.qp.max_iter == 0 {
            return Err(SchemeError::Config("QP tolerance and iteration limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepCounters {
    /// Interval integrations (one per node per iteration).
    pub integrations: usize,
    /// Forward sensitivity (full Jacobian) evaluations.
    pub forward_sensitivities: usize,
    /// Reverse sweeps, each possibly carrying several seeds.
    pub adjoint_sweeps: usize,
    pub qp_iterations: usize,
}

impl std::ops::AddAssign for StepCounters {
    fn add_assign(&mut self, o: Self) {
        self.integrations += o.integrations;
        self.forward_sensitivities += o.forward_sensitivities;
        self.adjoint_sweeps += o.adjoint_sweeps;
        self.qp_iterations += o.qp_iterations;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub instant: usize,
    pub u0: DVector<f64>,
    pub refreshed: Vec<usize>,
    pub refresh_fraction: f64,
    /// Tolerance, thresholds and measures used for this iteration's decision.
    pub cmon: CmonState,
    pub dto: Option<DtoRecord>,
    /// `rho_i * sqrt(|P^T dlambda|^2 + |P dw|^2)` when requested.
    pub dto_first_order_bound: Option<f64>,
    /// Exact KKT residual at the updated iterate.
    pub kkt: Option<f64>,
    pub step_norm: f64,
    pub counters: StepCounters,
}

/// One controller instance: iterate, held Jacobians and update-rule state.
#[derive(Debug, Clone)]
pub struct Controller {
    pub ocp: Ocp,
    pub config: SchemeConfig,
    pub traj: Trajectory,
    pub mult: Multipliers,
    store: SensitivityStore,
    constants: Option<ThresholdConstants>,
    e_bar: f64,
    eta: (f64, f64),
    v_norms: (f64, f64),
    last_step: Option<QpStep>,
    has_blocks: bool,
    instant: usize,
}

struct NodeEval {
    phi: Vec<DVector<f64>>,
    /// Exact `lambda_{k+1}^T grad phi_k`, for nodes that stay stale.
    adjoint: Vec<Option<DVector<f64>>>,
    /// Exact `dlambda_{k+1}^T grad phi_k` with the previous increment.
    adjoint_dual: Vec<Option<DVector<f64>>>,
}

impl Controller {
    pub fn new(ocp: Ocp, config: SchemeConfig, traj: Trajectory, mult: Multipliers) -> Result<Self, SchemeError> {
        config.validate()?;
        traj.check(&ocp)?;
        let store = SensitivityStore::new(ocp.horizon, ocp.nx(), ocp.nu());
        let e_bar = dto_tolerance(config.cmon.eps_abs, config.cmon.eps_rel, ocp.n_w(), 0.0);
        Ok(Self {
            ocp,
            config,
            traj,
            mult,
            store,
            constants: None,
            e_bar,
            eta: (0.0, 0.0),
            v_norms: (0.0, 0.0),
            last_step: None,
            has_blocks: false,
            instant: 0,
        })
    }

    /// Precomputes every Jacobian block at `reference` (for ADJ-RTI).
    pub fn with_offline_jacobians(mut self, reference: &Trajectory) -> Result<Self, SchemeError> {
        reference.check(&self.ocp)?;
        let dynamics = self.ocp.model.dynamics.as_ref();
        for k in 0..self.ocp.horizon {
            let (_, block) = integrate_with_forward_sensitivity(dynamics, &reference.x[k], &reference.u[k], &self.ocp.integrator)?;
            self.store.blocks[k] = SensitivityBlock { value: block.value, stale: true };
        }
        self.has_blocks = true;
        Ok(self)
    }

    /// Uses fixed offline constants instead of deriving them from the first QP.
    pub fn with_threshold_constants(mut self, constants: ThresholdConstants) -> Self {
        self.constants = Some(constants);
        self
    }

    pub fn instant(&self) -> usize {
        self.instant
    }

    pub fn store(&self) -> &SensitivityStore {
        &self.store
    }

    pub fn threshold_constants(&self) -> Option<ThresholdConstants> {
        self.constants
    }

    /// Refresh set fixed by the scheme before any measure is evaluated;
    /// `None` means the CMoN decision applies.
    fn scheduled_refresh(&self) -> Option<Vec<usize>> {
        let all: Vec<usize> = (0..self.ocp.horizon).collect();
        match self.config.kind {
            SchemeKind::Rti => Some(all),
            SchemeKind::MlRti { interval } => Some(if self.instant % interval == 0 || !self.has_blocks { all } else { Vec::new() }),
            SchemeKind::AdjRti => Some(if self.has_blocks { Vec::new() } else { all }),
            SchemeKind::CmonRti => {
                if self.store.caches_valid && self.has_blocks {
                    None
                } else {
                    Some(all)
                }
            }
        }
    }

    fn evaluate_nodes(&self, need_adjoint: bool, dual_seeds: Option<&[DVector<f64>]>, counters: &mut StepCounters) -> Result<NodeEval, SchemeError> {
        let n = self.ocp.horizon;
        let dynamics = self.ocp.model.dynamics.as_ref();
        let mut eval = NodeEval { phi: Vec::with_capacity(n), adjoint: vec![None; n], adjoint_dual: vec![None; n] };
        for k in 0..n {
            let mut seeds: Vec<&DVector<f64>> = Vec::new();
            if need_adjoint {
                seeds.push(&self.mult.lambda[k + 1]);
            }
            if let Some(d) = dual_seeds {
                seeds.push(&d[k]);
            }
            let (phi, rows) = integrate_with_adjoints(dynamics, &self.traj.x[k], &self.traj.u[k], &self.ocp.integrator, &seeds)?;
            counters.integrations += 1;
            if !seeds.is_empty() {
                counters.adjoint_sweeps += 1;
            }
            let mut rows = rows.into_iter();
            if need_adjoint {
                eval.adjoint[k] = rows.next();
            }
            if dual_seeds.is_some() {
                eval.adjoint_dual[k] = rows.next();
            }
            eval.phi.push(phi);
        }
        Ok(eval)
    }

    /// One iteration for measurement `x_hat` and references `refs`.
    pub fn step(&mut self, x_hat: &DVector<f64>, refs: &References) -> Result<StepReport, SchemeError> {
        let ocp = &self.ocp;
        let n = ocp.horizon;
        let dynamics = ocp.model.dynamics.as_ref();
        let mut counters = StepCounters::default();
        let scheduled = self.scheduled_refresh();
        let mut cmon_state = CmonState {
            e_bar: self.e_bar,
            eta_pri: self.eta.0,
            eta_dual: self.eta.1,
            constants: self.constants,
            v_pri_norm: self.v_norms.0,
            v_dual_norm: self.v_norms.1,
            ..CmonState::default()
        };

        let mut phi: Vec<DVector<f64>>;
        let mut adjoint: Vec<Option<DVector<f64>>>;
        let mut blocks: Vec<DMatrix<f64>> = self.store.blocks.iter().map(|b| b.value.clone()).collect();
        let refresh: Vec<usize>;

        match scheduled {
            Some(ref set) if set.len() == n => {
                phi = Vec::with_capacity(n);
                adjoint = vec![None; n];
                for k in 0..n {
                    let (p, block) = integrate_with_forward_sensitivity(dynamics, &self.traj.x[k], &self.traj.u[k], &ocp.integrator)?;
                    counters.integrations += 1;
                    counters.forward_sensitivities += 1;
                    phi.push(p);
                    blocks[k] = block.value;
                }
                refresh = set.clone();
            }
            Some(_) => {
                let eval = self.evaluate_nodes(true, None, &mut counters)?;
                phi = eval.phi;
                adjoint = eval.adjoint;
                refresh = Vec::new();
            }
            None => {
                let prev = self.last_step.as_ref().expect("caches valid implies a previous step");
                let dual_seeds: Vec<DVector<f64>> = prev.dlambda[1..].to_vec();
                let eval = self.evaluate_nodes(true, Some(&dual_seeds), &mut counters)?;
                let kappa: Vec<f64> = (0..n)
                    .map(|k| primal_cmon(&eval.phi[k], &self.store.prev_phi[k], &self.store.prev_dir_pri[k]))
                    .collect();
                let kappa_dual: Vec<f64> = (0..n)
                    .map(|k| dual_cmon(eval.adjoint_dual[k].as_ref().expect("dual seed"), &self.store.prev_dir_dual[k]))
                    .collect();
                refresh = update_decision(&kappa, &kappa_dual, self.eta.0, self.eta.1, self.config.cmon.min_update_fraction);
                cmon_state.kappa = kappa;
                cmon_state.kappa_dual = kappa_dual;
                phi = eval.phi;
                adjoint = eval.adjoint;
                for &k in &refresh {
                    let (p, block) = integrate_with_forward_sensitivity(dynamics, &self.traj.x[k], &self.traj.u[k], &ocp.integrator)?;
                    counters.forward_sensitivities += 1;
                    phi[k] = p;
                    blocks[k] = block.value;
                    adjoint[k] = None;
                }
            }
        }

        // gradient terms: fresh blocks use block^T lambda, stale ones the sweep
        let adjoint: Vec<DVector<f64>> = (0..n)
            .map(|k| adjoint[k].take().unwrap_or_else(|| blocks[k].tr_mul(&self.mult.lambda[k + 1])))
            .collect();
        let inputs: Vec<NodeInput<'_>> = (0..n).map(|k| NodeInput { phi: &phi[k], jacobian: &blocks[k], adjoint: &adjoint[k] }).collect();
        let data = build_qp(ocp, &self.traj, &self.mult, x_hat, refs, &inputs)?;
        let (sol, step) = solve_qp(&data, &self.config.qp)?;
        counters.qp_iterations = sol.iterations;
        let (new_traj, new_mult) = apply_step(&self.traj, &self.mult, &step)?;

        // offline constants from the first (fully refreshed) QP
        let mut constants = self.constants;
        let uses_thresholds = self.config.kind == SchemeKind::CmonRti && self.config.cmon.fixed_thresholds.is_none();
        if constants.is_none() && uses_thresholds && refresh.len() == n {
            let (rho0, gamma0) = rho_gamma(&build_m(&data, &sol))?;
            constants = Some(ThresholdConstants { rho0, gamma0 });
            cmon_state.constants = constants;
        }

        let mut dto = None;
        let mut dto_first_order_bound = None;
        if self.config.dto_oracle {
            let mut exact_blocks = blocks.clone();
            let stale: Vec<usize> = (0..n).filter(|k| !refresh.contains(k)).collect();
            for &k in &stale {
                let (_, block) = integrate_with_forward_sensitivity(dynamics, &self.traj.x[k], &self.traj.u[k], &ocp.integrator)?;
                exact_blocks[k] = block.value;
            }
            let exact_adj: Vec<DVector<f64>> = (0..n).map(|k| exact_blocks[k].tr_mul(&self.mult.lambda[k + 1])).collect();
            let exact_inputs: Vec<NodeInput<'_>> =
                (0..n).map(|k| NodeInput { phi: &phi[k], jacobian: &exact_blocks[k], adjoint: &exact_adj[k] }).collect();
            let exact_data = build_qp(ocp, &self.traj, &self.mult, x_hat, refs, &exact_inputs)?;
            let (exact_sol, exact_step) = solve_qp(&exact_data, &self.config.qp)?;
            dto = Some(measure_dto(self.instant, &step, &exact_step, self.e_bar));
            if self.config.per_instant_rho {
                let (rho, _) = rho_gamma(&build_m(&exact_data, &exact_sol))?;
                let p: Vec<DMatrix<f64>> = (0..n).map(|k| &blocks[k] - &exact_blocks[k]).collect();
                dto_first_order_bound = Some(rho * perturbation_size(&p, &step));
            }
        }

        let kkt = if self.config.log_kkt {
            Some(kkt_residual(ocp, &new_traj, &new_mult, x_hat, refs)?)
        } else {
            None
        };

        // commit
        let nodes: Vec<DVector<f64>> = (0..n).map(|k| self.traj.node(k)).collect();
        for &k in &refresh {
            self.store.blocks[k] = SensitivityBlock::fresh(blocks[k].clone());
        }
        for (k, b) in self.store.blocks.iter_mut().enumerate() {
            if !refresh.contains(&k) {
                b.stale = true;
            }
        }
        let dw: Vec<DVector<f64>> = (0..n).map(|k| step.dw().node(k)).collect();
        self.store.record(&phi, &nodes, &dw, &step.dlambda[1..]);
        self.has_blocks = true;
        self.constants = constants;
        let step_norm = step.norm();
        self.e_bar = dto_tolerance(self.config.cmon.eps_abs, self.config.cmon.eps_rel, ocp.n_w(), step_norm);
        self.v_norms = self.store.v_norms();
        self.eta = match (self.config.cmon.fixed_thresholds, constants) {
            (Some(fixed), _) => fixed,
            (None, Some(c)) => compute_thresholds(self.e_bar, c, &self.config.cmon, self.v_norms.0, self.v_norms.1),
            (None, None) => (0.0, 0.0),
        };
        self.traj = new_traj;
        self.mult = new_mult;
        self.last_step = Some(step);
        let report = StepReport {
            instant: self.instant,
            u0: self.traj.u[0].clone(),
            refresh_fraction: refresh.len() as f64 / n as f64,
            refreshed: refresh,
            cmon: cmon_state,
            dto,
            dto_first_order_bound,
            kkt,
            step_norm,
            counters,
        };
        self.instant += 1;
        Ok(report)
    }
}

/// `rho` and `gamma` of `M` at the exact-Jacobian QP of the given iterate.
pub fn threshold_constants_at(
    ocp: &Ocp,
    traj: &Trajectory,
    mult: &Multipliers,
    x_hat: &DVector<f64>,
    refs: &References,
    settings: &QpSettings,
) -> Result<ThresholdConstants, SchemeError> {
    let dynamics = ocp.model.dynamics.as_ref();
    let mut phi = Vec::with_capacity(ocp.horizon);
    let mut blocks = Vec::with_capacity(ocp.horizon);
    for k in 0..ocp.horizon {
        let (p, block) = integrate_with_forward_sensitivity(dynamics, &traj.x[k], &traj.u[k], &ocp.integrator)?;
        phi.push(p);
        blocks.push(block.value);
    }
    let adjoint: Vec<DVector<f64>> = (0..ocp.horizon).map(|k| blocks[k].tr_mul(&mult.lambda[k + 1])).collect();
    let inputs: Vec<NodeInput<'_>> =
        (0..ocp.horizon).map(|k| NodeInput { phi: &phi[k], jacobian: &blocks[k], adjoint: &adjoint[k] }).collect();
    let data = build_qp(ocp, traj, mult, x_hat, refs, &inputs)?;
    let (sol, _) = solve_qp(&data, settings)?;
    let (rho0, gamma0) = rho_gamma(&build_m(&data, &sol))?;
    Ok(ThresholdConstants { rho0, gamma0 })
}

// ---------------------------------------------------------------------------
// CMoN-SQP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpConfig {
    pub max_iters: usize,
    pub kkt_tol: f64,
    pub scheme: SchemeConfig,
}

impl SqpConfig {
    /// Full-step SQP with partial updates driven by `eps_abs`, `eps_rel`, `c1`.
    pub fn cmon(eps_abs: f64, eps_rel: f64, c1: f64) -> Self {
        let mut scheme = SchemeConfig::new(SchemeKind::CmonRti);
        scheme.cmon = CmonSettings { eps_abs, eps_rel, c1, ..CmonSettings::default() };
        scheme.log_kkt = false;
        Self { max_iters: 100, kkt_tol: 1e-6, scheme }
    }

    /// Full-step Gauss-Newton SQP with exact Jacobians.
    pub fn exact() -> Self {
        let mut scheme = SchemeConfig::new(SchemeKind::Rti);
        scheme.log_kkt = false;
        Self { max_iters: 100, kkt_tol: 1e-6, scheme }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpIteration {
    pub iteration: usize,
    /// Exact KKT residual at the iterate before this step.
    pub kkt: f64,
    pub refreshed: usize,
    pub forward_sensitivities: usize,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SqpOutcome {
    pub traj: Trajectory,
    pub mult: Multipliers,
    pub converged: bool,
    /// QP steps taken.
    pub iterations: usize,
    pub final_kkt: f64,
    pub log: Vec<SqpIteration>,
    /// Iterates `w^0 .. w^final`.
    pub iterates: Vec<Trajectory>,
    pub counters: StepCounters,
}

/// Consecutive KKT increases treated as divergence.
pub const DIVERGENCE_STREAK: usize = 5;
/// Growth factor an iteration must exceed to count as an increase, so that
/// round-off wobble at the attainable accuracy floor is not divergence.
pub const DIVERGENCE_GROWTH: f64 = 1.01;

/// Repeats controller steps on a fixed problem until the exact KKT residual
/// drops below `kkt_tol`.
pub fn cmon_sqp_solve(
    ocp: &Ocp,
    x_hat: &DVector<f64>,
    refs: &References,
    initial: Trajectory,
    initial_mult: Multipliers,
    cfg: &SqpConfig,
) -> Result<SqpOutcome, SchemeError> {
    if !(cfg.kkt_tol > 0.0) {
        return Err(SchemeError::Config("kkt_tol must be positive".into()));
    }
    let mut ctrl = Controller::new(ocp.clone(), cfg.scheme, initial, initial_mult)?;
    let mut log = Vec::new();
    let mut iterates = vec![ctrl.traj.clone()];
    let mut counters = StepCounters::default();
    let mut streak = 0;
    let mut prev_kkt = f64::INFINITY;
    for iteration in 0..=cfg.max_iters {
        let kkt = kkt_residual(ocp, &ctrl.traj, &ctrl.mult, x_hat, refs)?;
        if kkt <= cfg.kkt_tol || iteration == cfg.max_iters {
            return Ok(SqpOutcome {
                converged: kkt <= cfg.kkt_tol,
                traj: ctrl.traj,
                mult: ctrl.mult,
                iterations: iteration,
                final_kkt: kkt,
                log,
                iterates,
                counters,
            });
        }
        streak = if kkt > DIVERGENCE_GROWTH * prev_kkt { streak + 1 } else { 0 };
        if streak >= DIVERGENCE_STREAK {
            return Err(SchemeError::Divergence { consecutive: streak, log });
        }
        prev_kkt = kkt;
        let report = ctrl.step(x_hat, refs)?;
        counters += report.counters;
        log.push(SqpIteration {
            iteration,
            kkt,
            refreshed: report.refreshed.len(),
            forward_sensitivities: report.counters.forward_sensitivities,
            step_norm: report.step_norm,
        });
        iterates.push(ctrl.traj.clone());
    }
    unreachable!("loop returns at max_iters")
}
