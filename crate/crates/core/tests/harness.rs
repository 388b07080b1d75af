use std::path::PathBuf;
use std::process::Command;

use cmon_rti::harness::{
    chain_scenario, closed_loop_simulate, export_log, initial_iterate, initial_state, log_header, pendulum_scenario,
    randomized_chain_trials, read_log, run_and_export, stabilizing_time, ScenarioConfig, SimulationLog, SimulationOptions,
};
use cmon_rti::integrator::integrate;
use cmon_rti::schemes::{Controller, SchemeKind};
use nalgebra::DVector;

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn short_pendulum(kind: SchemeKind, duration: f64) -> ScenarioConfig {
    let mut cfg = pendulum_scenario(20, kind);
    cfg.duration = duration;
    cfg
}

fn short_chain(kind: SchemeKind) -> ScenarioConfig {
    let mut cfg = chain_scenario(10, kind);
    cfg.duration = 1.0;
    cfg
}

#[test]
fn stabilizing_time_examples() {
    let norms = [0.5, 0.05, 0.2, 0.05, 0.05, 0.01];
    let controls: Vec<Vec<f64>> = norms.iter().map(|v| vec![*v, -v / 2.0]).collect();
    assert!((stabilizing_time(&controls, 0.2, 0.1, 50.0) - 0.6).abs() < 1e-12);
    assert_eq!(stabilizing_time(&vec![vec![0.0; 3]; 10], 0.2, 0.1, 50.0), 0.0);
    assert_eq!(stabilizing_time(&vec![vec![1.0]; 10], 0.2, 0.1, 50.0), 50.0);
    assert_eq!(stabilizing_time(&[], 0.2, 0.1, 50.0), 0.0);
    // exactly at the threshold still counts as exceeding it
    assert_eq!(stabilizing_time(&[vec![0.1], vec![0.0]], 0.5, 0.1, 50.0), 0.5);
}

#[test]
fn zero_duration_gives_an_empty_log() {
    let log = closed_loop_simulate(&short_pendulum(SchemeKind::Rti, 0.0), 0, SimulationOptions::default()).unwrap();
    assert!(log.rows.is_empty());
    assert!(log.failure.is_none());
}

#[test]
fn one_row_per_instant() {
    let cfg = short_pendulum(SchemeKind::CmonRti, 1.0);
    let log = closed_loop_simulate(&cfg, 0, SimulationOptions::default()).unwrap();
    assert_eq!(log.rows.len(), 20);
    for (i, r) in log.rows.iter().enumerate() {
        assert!((r.time - i as f64 * 0.05).abs() < 1e-12);
        assert!(r.refreshed <= 20);
    }
}

#[test]
fn empty_log_exports_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    export_log(&SimulationLog::default(), 4, 1, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(text.trim_end(), log_header(4, 1).join(","));
    assert!(read_log(&path, 4, 1).unwrap().rows.is_empty());
}

#[test]
fn exported_logs_round_trip() {
    let mut cfg = short_pendulum(SchemeKind::CmonRti, 1.0);
    // fill the optional columns too
    cfg.scheme.dto_oracle = true;
    cfg.scheme.per_instant_rho = true;
    let mut log = closed_loop_simulate(&cfg, 0, SimulationOptions::default()).unwrap();
    log.failure = Some("controller failed at instant 19: synthetic".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    export_log(&log, 4, 1, &path).unwrap();
    let back = read_log(&path, 4, 1).unwrap();
    assert_eq!(back.rows, log.rows);
    assert_eq!(back.failure, log.failure);
    assert!(back.rows.iter().all(|r| r.dto.is_some() && r.kkt.is_some()));
    // a log for other dimensions is rejected
    assert!(read_log(&path, 27, 3).is_err());
}

#[test]
fn runs_are_reproducible() {
    let cfg = short_chain(SchemeKind::CmonRti);
    let (a, logs_a) = randomized_chain_trials(&cfg, 2).unwrap();
    let (b, logs_b) = randomized_chain_trials(&cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(logs_a, logs_b);
    // different trials see different initial states
    assert_ne!(logs_a[0].rows[0].state, logs_a[1].rows[0].state);
}

#[test]
fn trials_at_steady_state_need_no_control() {
    for kind in [SchemeKind::Rti, SchemeKind::CmonRti, SchemeKind::AdjRti, SchemeKind::MlRti { interval: 2 }] {
        let mut cfg = short_chain(kind);
        cfg.initial_noise = None;
        let (summary, logs) = randomized_chain_trials(&cfg, 1).unwrap();
        assert_eq!(summary.failures, 0);
        assert_eq!(summary.trials[0].stabilizing_time, 0.0, "{}", kind.name());
        assert!(logs[0].rows.iter().all(|r| r.control.iter().all(|u| u.abs() < 1e-6)));
    }
}

#[test]
fn reference_windows_shift_by_one_node() {
    let mut cfg = short_pendulum(SchemeKind::Rti, 6.0);
    cfg.horizon = 20;
    let options = SimulationOptions { keep_reference_windows: true, ..SimulationOptions::default() };
    let log = closed_loop_simulate(&cfg, 0, options).unwrap();
    let windows = &log.reference_windows;
    assert_eq!(windows.len(), log.rows.len());
    for i in 1..windows.len() {
        let (prev, curr) = (&windows[i - 1], &windows[i]);
        assert_eq!(&curr.x[..20], &prev.x[1..]);
        assert_eq!(&curr.u[..19], &prev.u[1..]);
    }
    // the switch at 5 s first appears at the end of the horizon
    let first = windows.iter().position(|w| w.x.last().unwrap()[0] > 0.0).unwrap();
    assert_eq!(first, 100 - 20);
    assert!(windows[first].x[..20].iter().all(|x| x[0] < 0.0));
}

#[test]
fn plant_matches_refined_model_integration() {
    let cfg = short_pendulum(SchemeKind::Rti, 1.0);
    let log = closed_loop_simulate(&cfg, 0, SimulationOptions::default()).unwrap();
    let model = cfg.dynamics().unwrap();
    let coarse = cfg.integrator();
    let plant = coarse.refined(cfg.plant_refinement);
    let finest = coarse.refined(16 * cfg.plant_refinement);
    for pair in log.rows.windows(2) {
        let x = DVector::from_vec(pair[0].state.clone());
        let u = DVector::from_vec(pair[0].control.clone());
        let next = DVector::from_vec(pair[1].state.clone());
        assert_eq!(integrate(model.as_ref(), &x, &u, &plant).unwrap(), next);
        // one-step prediction error of the controller model is the
        // discretization error of its coarser grid
        let predicted = integrate(model.as_ref(), &x, &u, &coarse).unwrap();
        let truth = integrate(model.as_ref(), &x, &u, &finest).unwrap();
        let err = (&predicted - &next).amax();
        assert!(err <= 1.01 * (&predicted - &truth).amax() + 1e-14, "{err:e}");
    }
}

#[test]
fn perfect_initialization_starts_at_the_optimum() {
    let cfg = pendulum_scenario(40, SchemeKind::Rti);
    let ocp = cfg.ocp().unwrap();
    let x0 = initial_state(&cfg, 0).unwrap();
    let (traj, mult) = initial_iterate(&cfg, &ocp, &x0).unwrap();
    let steady = cfg.steady_state().unwrap();
    let mut ctrl = Controller::new(ocp, cfg.scheme, traj, mult).unwrap();
    let report = ctrl.step(&x0, &cfg.reference_window(0, &steady)).unwrap();
    assert!(report.step_norm < 1e-6, "first step {:e}", report.step_norm);
}

#[test]
fn scenario_files_match_the_built_in_scenarios() {
    for (file, built_in) in [
        ("pendulum.toml", pendulum_scenario(40, SchemeKind::CmonRti)),
        ("chain.toml", chain_scenario(40, SchemeKind::CmonRti)),
    ] {
        let text = std::fs::read_to_string(scenario_file(file)).unwrap();
        let parsed = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, built_in, "{file}");
        // serialization round trip
        assert_eq!(ScenarioConfig::from_toml(&parsed.to_toml()).unwrap(), parsed);
    }
}

#[test]
fn invalid_scenarios_are_rejected() {
    let base = pendulum_scenario(10, SchemeKind::Rti);
    let mut bad = base.clone();
    bad.horizon = 1;
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.duration = -1.0;
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.weights.stage.pop();
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.reference.swap(0, 1);
    assert!(bad.validate().is_err());
    let mut bad = base;
    bad.trials = 0;
    assert!(bad.validate().is_err());
    assert!(ScenarioConfig::from_toml("horizon = 'ten'").is_err());
}

#[test]
fn manifest_echoes_the_config_text() {
    let mut cfg = short_pendulum(SchemeKind::CmonRti, 0.5);
    cfg.name = "tiny".into();
    let text = format!("# a comment that must survive\n{}", cfg.to_toml());
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_and_export(&cfg, &text, dir.path()).unwrap();
    assert_eq!(manifest.config, text);
    let on_disk: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk["config"].as_str().unwrap(), text);
    assert_eq!(on_disk["seed"].as_u64().unwrap(), cfg.seed);
    for name in &manifest.logs {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(manifest.logs.len(), 2);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmon-rti"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cli().args(["--scenario", "/nonexistent/scenario.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(4));

    let bad = dir.path().join("bad.toml");
    let mut cfg = short_pendulum(SchemeKind::Rti, 0.5);
    std::fs::write(&bad, cfg.to_toml().replace("horizon = 20", "horizon = 1")).unwrap();
    let out = cli().arg("--scenario").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let unknown = cli().arg("--scenario").arg(scenario_file("pendulum.toml")).args(["--scheme", "fast"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    cfg.name = "cli".into();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, cfg.to_toml()).unwrap();
    let out_dir = dir.path().join("out");
    let out = cli().arg("--scenario").arg(&good).args(["--scheme", "ml_rti:2", "--out"]).arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("cli_ml_rti_trial000.csv").exists());
}
