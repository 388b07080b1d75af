use cmon_rti::harness::{closed_loop_simulate, pendulum_scenario, swing_up_problem, ScenarioConfig, SimulationLog, SimulationOptions};
use cmon_rti::schemes::{SchemeKind, SqpConfig};

fn short(kind: SchemeKind) -> ScenarioConfig {
    let mut cfg = pendulum_scenario(20, kind);
    // spans the first reference switch
    cfg.duration = 6.0;
    cfg
}

fn run(cfg: &ScenarioConfig) -> SimulationLog {
    let log = closed_loop_simulate(cfg, 0, SimulationOptions::default()).unwrap();
    assert!(log.failure.is_none(), "{:?}", log.failure);
    log
}

fn max_control_gap(a: &SimulationLog, b: &SimulationLog) -> f64 {
    assert_eq!(a.rows.len(), b.rows.len());
    a.rows
        .iter()
        .zip(&b.rows)
        .flat_map(|(r, s)| r.control.iter().zip(&s.control).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn zero_tolerance_cmon_reproduces_rti() {
    let mut cmon = short(SchemeKind::CmonRti);
    cmon.scheme.cmon.eps_abs = 0.0;
    cmon.scheme.cmon.eps_rel = 0.0;
    let a = run(&cmon);
    let b = run(&short(SchemeKind::Rti));
    assert!(a.rows.iter().all(|r| r.refreshed == 20));
    let gap = max_control_gap(&a, &b);
    assert!(gap < 1e-10, "controls differ by {gap:e}");
}

#[test]
fn multi_level_with_unit_interval_is_rti() {
    let a = run(&short(SchemeKind::MlRti { interval: 1 }));
    let b = run(&short(SchemeKind::Rti));
    assert_eq!(a.controls(), b.controls());
}

#[test]
fn infinite_thresholds_reproduce_adjoint_rti() {
    let mut cmon = short(SchemeKind::CmonRti);
    cmon.scheme.cmon.fixed_thresholds = Some((f64::INFINITY, f64::INFINITY));
    cmon.scheme.cmon.min_update_fraction = 0.0;
    let a = run(&cmon);
    let b = run(&short(SchemeKind::AdjRti));
    assert_eq!(a.rows[0].refreshed, 20);
    assert!(a.rows.iter().skip(1).all(|r| r.refreshed == 0));
    let gap = max_control_gap(&a, &b);
    assert!(gap < 1e-10, "controls differ by {gap:e}");
}

#[test]
fn counters_track_refreshes() {
    let log = run(&short(SchemeKind::CmonRti));
    for r in &log.rows {
        assert_eq!(r.integrations, 20);
        assert_eq!(r.forward_sensitivities, r.refreshed);
        assert!(r.qp_iterations > 0);
    }
    assert!(log.rows.iter().any(|r| r.refreshed < 20), "no block was ever kept");
    let ml = run(&short(SchemeKind::MlRti { interval: 4 }));
    for (i, r) in ml.rows.iter().enumerate() {
        assert_eq!(r.forward_sensitivities, if i % 4 == 0 { 20 } else { 0 });
    }
}

#[test]
fn zero_tolerance_sqp_follows_exact_iterates() {
    let problem = swing_up_problem(40).unwrap();
    let start = problem.heuristic_guess().unwrap();
    let exact = problem.solve(start.clone(), &SqpConfig::exact()).unwrap();
    let cmon = problem.solve(start, &SqpConfig::cmon(0.0, 0.0, 0.1)).unwrap();
    assert!(exact.converged && cmon.converged);
    assert_eq!(exact.iterates.len(), cmon.iterates.len());
    for (i, (a, b)) in exact.iterates.iter().zip(&cmon.iterates).enumerate() {
        let gap = (a.flatten() - b.flatten()).amax();
        assert!(gap < 1e-10, "iterate {i} differs by {gap:e}");
    }
}

#[test]
fn partial_updates_still_converge_with_fewer_sensitivities() {
    let problem = swing_up_problem(40).unwrap();
    let start = problem.heuristic_guess().unwrap();
    let exact = problem.solve(start.clone(), &SqpConfig::exact()).unwrap();
    let cmon = problem.solve(start, &SqpConfig::cmon(1e-2, 1e-2, 0.1)).unwrap();
    assert!(cmon.converged, "final KKT {:e}", cmon.final_kkt);
    assert!(cmon.counters.forward_sensitivities < exact.counters.forward_sensitivities);
    assert!((cmon.traj.flatten() - exact.traj.flatten()).amax() < 1e-4);
}

#[test]
fn swing_up_guess_is_dynamically_consistent() {
    let problem = swing_up_problem(40).unwrap();
    let guess = problem.heuristic_guess().unwrap();
    let controls: Vec<f64> = guess.u.iter().map(|u| u[0]).collect();
    assert_eq!(problem.rollout(&controls).unwrap(), guess);
    assert!(controls.iter().all(|f| f.abs() <= problem.force_limit));
    let optimum = problem.solve_exact(1e-8).unwrap();
    assert!(optimum.converged);
    // the optimum ends near upright
    let last = optimum.traj.x.last().unwrap();
    assert!(last[1].cos() > 0.9, "final angle {}", last[1]);
    // zero amplitude only clips bound violations within the QP tolerance
    let replay = problem.perturbed(&optimum.traj, 0.0).unwrap();
    assert!((replay.flatten() - optimum.traj.flatten()).amax() < 1e-6);
}
