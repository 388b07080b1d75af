//! Closed-loop benchmark driver: scenario configuration, plant simulation,
//! randomized chain trials, statistics and CSV/JSON export.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{integrate, IntegratorConfig, IntegratorError};
use crate::models::{BoxBounds, Chain, ChainParams, Constraint, Dynamics, ModelError, ModelSpec, Pendulum, PendulumParams};
use crate::cmon::ThresholdConstants;
use crate::schemes::{cmon_sqp_solve, threshold_constants_at, Controller, SchemeConfig, SchemeError, SchemeKind, SqpConfig, SqpOutcome};
use crate::transcription::{Multipliers, Ocp, References, Trajectory, TranscriptionError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("could not parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl From<TranscriptionError> for HarnessError {
    fn from(e: TranscriptionError) -> Self {
        HarnessError::Scheme(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Pendulum {
        #[serde(default)]
        params: PendulumParams,
        /// Bound on the cart position `|p|`.
        position_limit: f64,
        /// Bound on the force `|F|`.
        force_limit: f64,
    },
    Chain {
        #[serde(default)]
        params: ChainParams,
        /// Bound on each free-end velocity component.
        control_limit: f64,
        /// Free-end position at the steady state being regulated to.
        free_end: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// Diagonal of `blkdiag(Q, R)`.
    pub stage: Vec<f64>,
    /// Diagonal of `Q_N`.
    pub terminal: Vec<f64>,
}

/// Reference held from `start` until the next segment begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSegment {
    pub start: f64,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialNoise {
    /// Half-width of the uniform perturbation of every position coordinate.
    pub position: f64,
    /// Half-width of the uniform perturbation of every velocity coordinate.
    pub velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stabilization {
    /// `|u|_inf` must stay below this from the stabilizing time on.
    pub threshold: f64,
    /// Reported stabilizing time when the threshold is never met for good.
    pub cap: f64,
}

impl Default for Stabilization {
    fn default() -> Self {
        Self { threshold: 0.1, cap: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub model: ModelConfig,
    pub horizon: usize,
    /// Sampling interval, also the shooting interval length [s].
    pub sampling_time: f64,
    pub duration: f64,
    #[serde(default = "default_steps")]
    pub steps_per_interval: usize,
    /// Plant integration uses this many times more RK4 steps than the
    /// controller; 1 makes plant and prediction model identical.
    #[serde(default = "default_steps")]
    pub plant_refinement: usize,
    pub weights: Weights,
    /// Piecewise-constant references. Empty means the steady state.
    #[serde(default)]
    pub reference: Vec<ReferenceSegment>,
    /// Plant state at `t = 0`. Defaults to the first reference state.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// Start from the converged solution of the `t = 0` problem instead of
    /// a constant guess.
    #[serde(default)]
    pub perfect_initialization: bool,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Random perturbation of the initial state around the steady state.
    #[serde(default)]
    pub initial_noise: Option<InitialNoise>,
    #[serde(default)]
    pub stabilization: Stabilization,
}

fn default_steps() -> usize {
    4
}

fn default_trials() -> usize {
    1
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if !(self.sampling_time > 0.0) || !(self.duration >= 0.0) {
            return bad("sampling_time must be positive and duration nonnegative");
        }
        if self.steps_per_interval == 0 || self.plant_refinement == 0 {
            return bad("steps_per_interval and plant_refinement must be at least 1");
        }
        match &self.model {
            ModelConfig::Pendulum { params, position_limit, force_limit } => {
                params.validate()?;
                if !(*position_limit > 0.0 && *force_limit > 0.0) {
                    return bad("pendulum limits must be positive");
                }
            }
            ModelConfig::Chain { params, control_limit, .. } => {
                params.validate()?;
                if !(*control_limit > 0.0) {
                    return bad("chain control limit must be positive");
                }
            }
        }
        let (nx, nu) = self.dims();
        if self.weights.stage.len() != nx + nu || self.weights.terminal.len() != nx {
            return bad("weight vectors do not match the model dimensions");
        }
        for seg in &self.reference {
            if seg.state.len() != nx || seg.control.len() != nu {
                return bad("reference segment dimensions do not match the model");
            }
        }
        if self.reference.windows(2).any(|w| w[1].start <= w[0].start) {
            return bad("reference segments must have increasing start times");
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != nx {
                return bad("initial_state has the wrong length");
            }
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        self.scheme.validate()?;
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.model {
            ModelConfig::Pendulum { .. } => (4, 1),
            ModelConfig::Chain { params, .. } => (params.nx(), 3),
        }
    }

    /// Number of sampling instants simulated.
    pub fn instants(&self) -> usize {
        (self.duration / self.sampling_time + 1e-9).floor() as usize
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig { steps_per_interval: self.steps_per_interval, interval_length: self.sampling_time }
    }

    pub fn dynamics(&self) -> Result<Arc<dyn Dynamics>, HarnessError> {
        Ok(match &self.model {
            ModelConfig::Pendulum { params, .. } => Arc::new(Pendulum::new(*params)?),
            ModelConfig::Chain { params, .. } => Arc::new(Chain::new(*params)?),
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec, HarnessError> {
        let (path, initial, terminal): (Arc<dyn Constraint>, Arc<dyn Constraint>, Arc<dyn Constraint>) = match &self.model {
            // z = (p, theta, pdot, thetadot, F)
            ModelConfig::Pendulum { position_limit, force_limit, .. } => {
                let force = BoxBounds::symmetric([4], *force_limit);
                let mut path = BoxBounds::symmetric([0], *position_limit);
                path.entries.extend(force.entries.iter().copied());
                (Arc::new(path), Arc::new(force), Arc::new(BoxBounds::symmetric([0], *position_limit)))
            }
            ModelConfig::Chain { params, control_limit, .. } => {
                let nx = params.nx();
                let bounds: Arc<dyn Constraint> = Arc::new(BoxBounds::symmetric(nx..nx + 3, *control_limit));
                (bounds.clone(), bounds, Arc::new(BoxBounds::none()))
            }
        };
        Ok(ModelSpec::new(
            self.dynamics()?,
            path,
            terminal,
            DVector::from_vec(self.weights.stage.clone()),
            DVector::from_vec(self.weights.terminal.clone()),
        )?
        .with_initial_constraint(initial))
    }

    pub fn ocp(&self) -> Result<Ocp, HarnessError> {
        Ok(Ocp::new(self.model_spec()?, self.horizon, self.integrator())?)
    }

    /// State and control the plant is regulated to when no references are set.
    pub fn steady_state(&self) -> Result<(DVector<f64>, DVector<f64>), HarnessError> {
        Ok(match &self.model {
            ModelConfig::Pendulum { .. } => (DVector::zeros(4), DVector::zeros(1)),
            ModelConfig::Chain { params, free_end, .. } => (params.equilibrium(*free_end)?, DVector::zeros(3)),
        })
    }

    /// Reference in force at time `t`.
    pub fn reference_at(&self, t: f64, steady: &(DVector<f64>, DVector<f64>)) -> (DVector<f64>, DVector<f64>) {
        match self.reference.iter().rev().find(|s| s.start <= t + 1e-9) {
            Some(seg) => (DVector::from_vec(seg.state.clone()), DVector::from_vec(seg.control.clone())),
            None => match self.reference.first() {
                Some(seg) => (DVector::from_vec(seg.state.clone()), DVector::from_vec(seg.control.clone())),
                None => steady.clone(),
            },
        }
    }

    /// Reference window at instant `i`: node `k` tracks the reference at
    /// `t_i + k T_s`, so changes enter from the end of the horizon.
    pub fn reference_window(&self, instant: usize, steady: &(DVector<f64>, DVector<f64>)) -> References {
        let t = instant as f64 * self.sampling_time;
        let mut x = Vec::with_capacity(self.horizon + 1);
        let mut u = Vec::with_capacity(self.horizon);
        for k in 0..=self.horizon {
            let (xr, ur) = self.reference_at(t + k as f64 * self.sampling_time, steady);
            x.push(xr);
            if k < self.horizon {
                u.push(ur);
            }
        }
        References { x, u }
    }

    /// Times at which the reference changes value.
    pub fn switch_times(&self) -> Vec<f64> {
        self.reference
            .windows(2)
            .filter(|w| w[0].state != w[1].state || w[0].control != w[1].control)
            .map(|w| w[1].start)
            .collect()
    }
}

/// Pendulum benchmark: upright start at rest, cart-position references
/// alternating between -0.6 and 0.6 every 5 s.
pub fn pendulum_scenario(horizon: usize, kind: SchemeKind) -> ScenarioConfig {
    let seg = |start: f64, p: f64| ReferenceSegment { start, state: vec![p, 0.0, 0.0, 0.0], control: vec![0.0] };
    let mut scheme = SchemeConfig::new(kind);
    scheme.cmon.eps_abs = 0.1;
    scheme.cmon.eps_rel = 0.1;
    ScenarioConfig {
        name: format!("pendulum_n{horizon}"),
        model: ModelConfig::Pendulum { params: PendulumParams::default(), position_limit: 1.0, force_limit: 20.0 },
        horizon,
        sampling_time: 0.05,
        duration: 20.0,
        steps_per_interval: 4,
        plant_refinement: 4,
        weights: Weights { stage: vec![30.0, 30.0, 0.1, 0.1, 0.03], terminal: vec![30.0, 30.0, 0.1, 0.1] },
        reference: vec![seg(0.0, -0.6), seg(5.0, 0.6), seg(10.0, -0.6), seg(15.0, 0.6), seg(20.0, -0.6)],
        initial_state: Some(vec![-0.6, 0.0, 0.0, 0.0]),
        perfect_initialization: true,
        scheme,
        seed: 0,
        trials: 1,
        initial_noise: None,
        stabilization: Stabilization::default(),
    }
}

/// Chain benchmark: regulate a perturbed hanging chain back to rest.
pub fn chain_scenario(horizon: usize, kind: SchemeKind) -> ScenarioConfig {
    let params = ChainParams::default();
    let nx = params.nx();
    let n_pos = 3 * params.n;
    let mut stage: Vec<f64> = (0..nx).map(|i| if i < n_pos { 1.0 } else { 0.1 }).collect();
    stage.extend([0.1; 3]);
    let terminal = stage[..nx].to_vec();
    let mut scheme = SchemeConfig::new(kind);
    scheme.cmon.eps_abs = 0.1;
    scheme.cmon.eps_rel = 0.1;
    scheme.cmon.min_update_fraction = 0.1;
    ScenarioConfig {
        name: format!("chain_n{horizon}"),
        model: ModelConfig::Chain { params, control_limit: 1.0, free_end: [1.0, 0.0, 0.0] },
        horizon,
        sampling_time: 0.2,
        duration: 50.0,
        steps_per_interval: 4,
        plant_refinement: 4,
        weights: Weights { stage, terminal },
        reference: Vec::new(),
        initial_state: None,
        perfect_initialization: false,
        scheme,
        seed: 0,
        trials: 10,
        initial_noise: Some(InitialNoise { position: 0.3, velocity: 0.3 }),
        stabilization: Stabilization::default(),
    }
}

/// Open-loop swing-up of the cart pendulum from hanging at rest to upright,
/// solved by full-step SQP.
#[derive(Debug, Clone)]
pub struct SwingUp {
    pub ocp: Ocp,
    pub x0: DVector<f64>,
    pub refs: References,
    pub force_limit: f64,
}

/// Cart travel allowed in the swing-up; one meter is too short to swing up
/// within the horizon under the force limit.
pub const SWING_UP_POSITION_LIMIT: f64 = 2.0;

/// Swing-up problem with the tracking weights and sampling of the pendulum
/// scenario.
pub fn swing_up_problem(horizon: usize) -> Result<SwingUp, HarnessError> {
    let mut cfg = pendulum_scenario(horizon, SchemeKind::Rti);
    let ModelConfig::Pendulum { position_limit, force_limit, .. } = &mut cfg.model else { unreachable!() };
    *position_limit = SWING_UP_POSITION_LIMIT;
    let force_limit = *force_limit;
    let ocp = cfg.ocp()?;
    let x0 = DVector::from_vec(vec![0.0, std::f64::consts::PI, 0.0, 0.0]);
    let refs = References::constant(&DVector::zeros(4), &DVector::zeros(1), horizon);
    Ok(SwingUp { ocp, x0, refs, force_limit })
}

impl SwingUp {
    /// Trajectory obtained by simulating the given controls from `x0`.
    pub fn rollout(&self, controls: &[f64]) -> Result<Trajectory, HarnessError> {
        let dynamics = self.ocp.model.dynamics.as_ref();
        let mut x = vec![self.x0.clone()];
        let mut u = Vec::with_capacity(controls.len());
        for &f in controls {
            let uk = DVector::from_element(1, f);
            let next = integrate(dynamics, x.last().expect("nonempty"), &uk, &self.ocp.integrator)?;
            x.push(next);
            u.push(uk);
        }
        Ok(Trajectory { x, u })
    }

    /// Rollout of an energy-pumping feedback: dynamically consistent but far
    /// from optimal.
    pub fn heuristic_guess(&self) -> Result<Trajectory, HarnessError> {
        let PendulumParams { m1, l, g, .. } = PendulumParams::default();
        let dynamics = self.ocp.model.dynamics.as_ref();
        let mut x = self.x0.clone();
        let mut controls = Vec::with_capacity(self.ocp.horizon);
        for k in 0..self.ocp.horizon {
            // energy relative to upright at rest
            let energy = 0.5 * m1 * l * l * x[3] * x[3] + m1 * g * l * (x[1].cos() - 1.0);
            let f = if k == 0 {
                // kick, since the feedback vanishes at rest
                self.force_limit
            } else {
                (-50.0 * energy * x[3] * x[1].cos() - 5.0 * x[0] - 5.0 * x[2]).clamp(-self.force_limit, self.force_limit)
            };
            x = integrate(dynamics, &x, &DVector::from_element(1, f), &self.ocp.integrator)?;
            controls.push(f);
        }
        self.rollout(&controls)
    }

    /// Exact Gauss-Newton SQP from the heuristic guess.
    pub fn solve_exact(&self, kkt_tol: f64) -> Result<SqpOutcome, HarnessError> {
        let mut cfg = SqpConfig::exact();
        cfg.kkt_tol = kkt_tol;
        Ok(cmon_sqp_solve(&self.ocp, &self.x0, &self.refs, self.heuristic_guess()?, Multipliers::zeros(&self.ocp), &cfg)?)
    }

    /// Start in a neighborhood of `optimum`: its controls plus
    /// `amplitude * sin(0.7 k)`, clamped to the force limit, simulated forward.
    pub fn perturbed(&self, optimum: &Trajectory, amplitude: f64) -> Result<Trajectory, HarnessError> {
        let controls: Vec<f64> = optimum
            .u
            .iter()
            .enumerate()
            .map(|(k, u)| (u[0] + amplitude * (0.7 * k as f64).sin()).clamp(-self.force_limit, self.force_limit))
            .collect();
        self.rollout(&controls)
    }

    pub fn solve(&self, start: Trajectory, cfg: &SqpConfig) -> Result<SqpOutcome, HarnessError> {
        Ok(cmon_sqp_solve(&self.ocp, &self.x0, &self.refs, start, Multipliers::zeros(&self.ocp), cfg)?)
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub time: f64,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub kkt: Option<f64>,
    pub dto: Option<f64>,
    pub e_bar: f64,
    pub dto_same_active_set: Option<bool>,
    pub dto_first_order_bound: Option<f64>,
    pub refreshed: usize,
    pub refresh_fraction: f64,
    pub eta_pri: f64,
    pub eta_dual: f64,
    pub v_pri_norm: f64,
    pub v_dual_norm: f64,
    pub kappa_max: f64,
    pub kappa_dual_max: f64,
    pub integrations: usize,
    pub forward_sensitivities: usize,
    pub adjoint_sweeps: usize,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationLog {
    pub scheme: String,
    pub rows: Vec<LogRow>,
    /// Set when the run stopped early.
    pub failure: Option<String>,
    pub rho0: Option<f64>,
    pub gamma0: Option<f64>,
    /// Reference windows used at each instant (kept only when requested).
    #[serde(skip)]
    pub reference_windows: Vec<References>,
}

impl SimulationLog {
    pub fn controls(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.control.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimulationOptions {
    /// Store the reference window of every instant in the log.
    pub keep_reference_windows: bool,
    /// Offline threshold constants; derived from the run's first QP if unset.
    pub threshold_constants: Option<ThresholdConstants>,
}

/// Offline `rho0`, `gamma0` for the nominal (noise-free) start of the scenario,
/// or `None` when the scheme does not use them.
pub fn offline_threshold_constants(cfg: &ScenarioConfig) -> Result<Option<ThresholdConstants>, HarnessError> {
    if cfg.scheme.kind != SchemeKind::CmonRti || cfg.scheme.cmon.fixed_thresholds.is_some() || cfg.instants() == 0 {
        return Ok(None);
    }
    let ocp = cfg.ocp()?;
    let steady = cfg.steady_state()?;
    let x0 = match &cfg.initial_state {
        Some(v) => DVector::from_vec(v.clone()),
        None => cfg.reference_at(0.0, &steady).0,
    };
    let (traj, mult) = initial_iterate(cfg, &ocp, &x0)?;
    let refs = cfg.reference_window(0, &steady);
    Ok(Some(threshold_constants_at(&ocp, &traj, &mult, &x0, &refs, &cfg.scheme.qp)?))
}

/// Initial guess and multipliers for the controller.
pub fn initial_iterate(cfg: &ScenarioConfig, ocp: &Ocp, x0: &DVector<f64>) -> Result<(Trajectory, Multipliers), HarnessError> {
    let steady = cfg.steady_state()?;
    let refs = cfg.reference_window(0, &steady);
    if cfg.perfect_initialization {
        let guess = Trajectory::constant(x0, &refs.u[0], cfg.horizon);
        let mut sqp = SqpConfig::exact();
        sqp.kkt_tol = 1e-9;
        sqp.max_iters = 200;
        let out = cmon_sqp_solve(ocp, x0, &refs, guess, Multipliers::zeros(ocp), &sqp)?;
        if !out.converged {
            return Err(HarnessError::Config(format!("perfect initialization did not converge (KKT {:.3e})", out.final_kkt)));
        }
        Ok((out.traj, out.mult))
    } else {
        Ok((Trajectory::constant(&steady.0, &steady.1, cfg.horizon), Multipliers::zeros(ocp)))
    }
}

/// Plant state at `t = 0` for trial `trial`.
pub fn initial_state(cfg: &ScenarioConfig, trial: usize) -> Result<DVector<f64>, HarnessError> {
    let steady = cfg.steady_state()?;
    let mut x0 = match &cfg.initial_state {
        Some(v) => DVector::from_vec(v.clone()),
        None => cfg.reference_at(0.0, &steady).0,
    };
    if let (Some(noise), ModelConfig::Chain { params, .. }) = (cfg.initial_noise, &cfg.model) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let n_pos = 3 * params.n;
        for i in 0..x0.len() {
            let half = if i < n_pos { noise.position } else { noise.velocity };
            if half > 0.0 {
                x0[i] += rng.random_range(-half..=half);
            }
        }
    }
    Ok(x0)
}

/// Runs one closed loop. Controller or plant failures end the log early with
/// a failure marker.
pub fn closed_loop_simulate(cfg: &ScenarioConfig, trial: usize, options: SimulationOptions) -> Result<SimulationLog, HarnessError> {
    cfg.validate()?;
    let ocp = cfg.ocp()?;
    let steady = cfg.steady_state()?;
    let plant = cfg.dynamics()?;
    let plant_cfg = cfg.integrator().refined(cfg.plant_refinement);
    let mut x = initial_state(cfg, trial)?;
    let mut log = SimulationLog { scheme: cfg.scheme.kind.name().to_string(), ..SimulationLog::default() };
    let instants = cfg.instants();
    if instants == 0 {
        return Ok(log);
    }
    let (traj, mult) = initial_iterate(cfg, &ocp, &x)?;
    let mut ctrl = Controller::new(ocp, cfg.scheme, traj, mult)?;
    if let Some(c) = options.threshold_constants {
        ctrl = ctrl.with_threshold_constants(c);
    }
    if cfg.scheme.kind == SchemeKind::AdjRti && !cfg.perfect_initialization {
        ctrl = ctrl.with_offline_jacobians(&Trajectory::constant(&steady.0, &steady.1, cfg.horizon))?;
    }
    for i in 0..instants {
        let refs = cfg.reference_window(i, &steady);
        let report = match ctrl.step(&x, &refs) {
            Ok(r) => r,
            Err(e) => {
                log.failure = Some(format!("controller failed at instant {i}: {e}"));
                break;
            }
        };
        if options.keep_reference_windows {
            log.reference_windows.push(refs);
        }
        let c = &report.cmon;
        let fmax = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        log.rows.push(LogRow {
            time: i as f64 * cfg.sampling_time,
            state: x.iter().copied().collect(),
            control: report.u0.iter().copied().collect(),
            kkt: report.kkt,
            dto: report.dto.map(|d| d.e),
            e_bar: c.e_bar,
            dto_same_active_set: report.dto.map(|d| d.same_active_set),
            dto_first_order_bound: report.dto_first_order_bound,
            refreshed: report.refreshed.len(),
            refresh_fraction: report.refresh_fraction,
            eta_pri: c.eta_pri,
            eta_dual: c.eta_dual,
            v_pri_norm: c.v_pri_norm,
            v_dual_norm: c.v_dual_norm,
            kappa_max: fmax(&c.kappa),
            kappa_dual_max: fmax(&c.kappa_dual),
            integrations: report.counters.integrations,
            forward_sensitivities: report.counters.forward_sensitivities,
            adjoint_sweeps: report.counters.adjoint_sweeps,
            qp_iterations: report.counters.qp_iterations,
        });
        match integrate(plant.as_ref(), &x, &report.u0, &plant_cfg) {
            Ok(next) => x = next,
            Err(e) => {
                log.failure = Some(format!("plant integration failed at instant {i}: {e}"));
                break;
            }
        }
    }
    if let Some(c) = ctrl.threshold_constants() {
        log.rho0 = Some(c.rho0);
        log.gamma0 = Some(c.gamma0);
    }
    Ok(log)
}

/// Earliest time from which every control satisfies `|u|_inf < threshold`;
/// `cap` when the last control still violates it or the log is empty of
/// compliant tails.
pub fn stabilizing_time(controls: &[Vec<f64>], sampling_time: f64, threshold: f64, cap: f64) -> f64 {
    let exceeds = |u: &Vec<f64>| u.iter().any(|v| v.abs() >= threshold || !v.is_finite());
    match controls.iter().rposition(exceeds) {
        None => 0.0,
        Some(last) if last + 1 == controls.len() => cap,
        Some(last) => ((last + 1) as f64 * sampling_time).min(cap),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub stabilizing_time: f64,
    pub failed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub scheme: String,
    pub horizon: usize,
    pub trials: Vec<TrialResult>,
    pub failures: usize,
    /// Mean stabilizing time over trials that did not fail.
    pub mean_stabilizing_time: Option<f64>,
    pub iqr_stabilizing_time: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(cfg: &ScenarioConfig, logs: &[SimulationLog]) -> TrialSummary {
    let stab = cfg.stabilization;
    let trials: Vec<TrialResult> = logs
        .iter()
        .enumerate()
        .map(|(trial, log)| {
            let mut t = stabilizing_time(&log.controls(), cfg.sampling_time, stab.threshold, stab.cap);
            if log.failure.is_some() {
                t = stab.cap;
            }
            TrialResult {
                trial,
                seed: cfg.seed.wrapping_add(trial as u64),
                stabilizing_time: t,
                failed: log.failure.is_some() || t >= stab.cap,
                failure: log.failure.clone(),
            }
        })
        .collect();
    let mut ok: Vec<f64> = trials.iter().filter(|t| !t.failed).map(|t| t.stabilizing_time).collect();
    ok.sort_by(f64::total_cmp);
    let (mean, iqr) = if ok.is_empty() {
        (None, None)
    } else {
        (Some(ok.iter().sum::<f64>() / ok.len() as f64), Some(quantile(&ok, 0.75) - quantile(&ok, 0.25)))
    };
    TrialSummary {
        scheme: cfg.scheme.kind.name().to_string(),
        horizon: cfg.horizon,
        failures: trials.iter().filter(|t| t.failed).count(),
        trials,
        mean_stabilizing_time: mean,
        iqr_stabilizing_time: iqr,
    }
}

/// Runs `trials` independent closed loops (in parallel) and summarizes them.
/// Offline threshold constants are computed once at the nominal start and
/// shared by all trials.
pub fn randomized_chain_trials(cfg: &ScenarioConfig, trials: usize) -> Result<(TrialSummary, Vec<SimulationLog>), HarnessError> {
    cfg.validate()?;
    let options = SimulationOptions { threshold_constants: offline_threshold_constants(cfg)?, ..SimulationOptions::default() };
    let logs = (0..trials)
        .into_par_iter()
        .map(|trial| closed_loop_simulate(cfg, trial, options))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((summarize(cfg, &logs), logs))
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

const SCALAR_COLUMNS: [&str; 18] = [
    "kkt",
    "dto",
    "e_bar",
    "dto_same_active_set",
    "dto_first_order_bound",
    "refreshed",
    "refresh_fraction",
    "eta_pri",
    "eta_dual",
    "v_pri_norm",
    "v_dual_norm",
    "kappa_max",
    "kappa_dual_max",
    "integrations",
    "forward_sensitivities",
    "adjoint_sweeps",
    "qp_iterations",
    "failure",
];

/// Column order: `time`, `x0..x{nx-1}`, `u0..u{nu-1}`, then the scalar columns.
pub fn log_header(nx: usize, nu: usize) -> Vec<String> {
    std::iter::once("time".to_string())
        .chain((0..nx).map(|i| format!("x{i}")))
        .chain((0..nu).map(|i| format!("u{i}")))
        .chain(SCALAR_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn export_log(log: &SimulationLog, nx: usize, nu: usize, path: &Path) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(log_header(nx, nu)).map_err(csv_err)?;
    for (i, r) in log.rows.iter().enumerate() {
        let failure = if i + 1 == log.rows.len() { log.failure.clone().unwrap_or_default() } else { String::new() };
        let mut rec: Vec<String> = vec![r.time.to_string()];
        rec.extend(r.state.iter().map(|v| v.to_string()));
        rec.extend(r.control.iter().map(|v| v.to_string()));
        rec.extend([
            opt(r.kkt),
            opt(r.dto),
            r.e_bar.to_string(),
            opt(r.dto_same_active_set),
            opt(r.dto_first_order_bound),
            r.refreshed.to_string(),
            r.refresh_fraction.to_string(),
            r.eta_pri.to_string(),
            r.eta_dual.to_string(),
            r.v_pri_norm.to_string(),
            r.v_dual_norm.to_string(),
            r.kappa_max.to_string(),
            r.kappa_dual_max.to_string(),
            r.integrations.to_string(),
            r.forward_sensitivities.to_string(),
            r.adjoint_sweeps.to_string(),
            r.qp_iterations.to_string(),
            failure,
        ]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Parses a file written by [`export_log`].
pub fn read_log(path: &Path, nx: usize, nu: usize) -> Result<SimulationLog, HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let parse_err = |m: String| HarnessError::Config(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|s| s.to_string()).collect();
    if header != log_header(nx, nu) {
        return Err(parse_err("unexpected header".into()));
    }
    let mut log = SimulationLog::default();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| parse_err(e.to_string()));
        let of = |i: usize| if rec[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        let u = |i: usize| rec[i].parse::<usize>().map_err(|e| parse_err(e.to_string()));
        let base = 1 + nx + nu;
        let same = if rec[base + 3].is_empty() { None } else { Some(&rec[base + 3] == "true") };
        if !rec[base + 17].is_empty() {
            log.failure = Some(rec[base + 17].to_string());
        }
        log.rows.push(LogRow {
            time: f(0)?,
            state: (1..=nx).map(f).collect::<Result<_, _>>()?,
            control: (1 + nx..base).map(f).collect::<Result<_, _>>()?,
            kkt: of(base)?,
            dto: of(base + 1)?,
            e_bar: f(base + 2)?,
            dto_same_active_set: same,
            dto_first_order_bound: of(base + 4)?,
            refreshed: u(base + 5)?,
            refresh_fraction: f(base + 6)?,
            eta_pri: f(base + 7)?,
            eta_dual: f(base + 8)?,
            v_pri_norm: f(base + 9)?,
            v_dual_norm: f(base + 10)?,
            kappa_max: f(base + 11)?,
            kappa_dual_max: f(base + 12)?,
            integrations: u(base + 13)?,
            forward_sensitivities: u(base + 14)?,
            adjoint_sweeps: u(base + 15)?,
            qp_iterations: u(base + 16)?,
        });
    }
    Ok(log)
}

pub fn export_summary(summary: &TrialSummary, path: &Path) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["trial", "seed", "stabilizing_time", "failed", "failure"]).map_err(csv_err)?;
    for t in &summary.trials {
        w.write_record([
            t.trial.to_string(),
            t.seed.to_string(),
            t.stabilizing_time.to_string(),
            t.failed.to_string(),
            t.failure.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub scheme: String,
    pub seed: u64,
    pub trials: usize,
    /// The configuration text exactly as read.
    pub config: String,
    pub logs: Vec<String>,
    pub summary: Option<TrialSummary>,
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|source| HarnessError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text).map_err(io_err(path))
}

/// Runs the scenario described by `config_text` and writes one CSV per trial,
/// a summary CSV and `manifest.json` into `out_dir`.
pub fn run_and_export(cfg: &ScenarioConfig, config_text: &str, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (summary, logs) = randomized_chain_trials(cfg, cfg.trials)?;
    let (nx, nu) = cfg.dims();
    let mut files = Vec::new();
    for (i, log) in logs.iter().enumerate() {
        let name = format!("{}_{}_trial{i:03}.csv", cfg.name, cfg.scheme.kind.name());
        export_log(log, nx, nu, &out_dir.join(&name))?;
        files.push(name);
    }
    let summary_name = format!("{}_{}_summary.csv", cfg.name, cfg.scheme.kind.name());
    export_summary(&summary, &out_dir.join(&summary_name))?;
    files.push(summary_name);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.name.clone(),
        scheme: cfg.scheme.kind.name().to_string(),
        seed: cfg.seed,
        trials: cfg.trials,
        config: config_text.to_string(),
        logs: files,
        summary: Some(summary),
    };
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
