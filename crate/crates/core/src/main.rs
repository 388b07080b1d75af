use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cmon_rti::harness::{run_and_export, HarnessError, ScenarioConfig};
use cmon_rti::schemes::SchemeKind;

/// Run a closed-loop NMPC benchmark scenario and export the logs.
#[derive(Debug, Parser)]
#[command(name = "cmon-rti", version)]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scheme: rti, adj_rti, cmon_rti or ml_rti:<interval>.
    #[arg(long)]
    scheme: Option<String>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of randomized trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the horizon length.
    #[arg(long)]
    horizon: Option<usize>,
    /// Also solve the exact-Jacobian QP every iteration and log the distance.
    #[arg(long)]
    dto_oracle: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    match s {
        "rti" => Ok(SchemeKind::Rti),
        "adj_rti" => Ok(SchemeKind::AdjRti),
        "cmon_rti" => Ok(SchemeKind::CmonRti),
        other => match other.strip_prefix("ml_rti:").map(str::parse::<usize>) {
            Some(Ok(interval)) => Ok(SchemeKind::MlRti { interval }),
            _ => Err(format!("unknown scheme '{other}'")),
        },
    }
}

enum Failure {
    Config(String),
    Controller(String),
    Io(String),
}

fn classify(e: HarnessError) -> Failure {
    match e {
        HarnessError::Io { .. } | HarnessError::Csv { .. } | HarnessError::Json { .. } => Failure::Io(e.to_string()),
        HarnessError::Scheme(_) | HarnessError::Integrator(_) => Failure::Controller(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&cli.scenario).map_err(|e| Failure::Io(format!("{}: {e}", cli.scenario.display())))?;
    let mut cfg = ScenarioConfig::from_toml(&text).map_err(classify)?;
    if let Some(s) = &cli.scheme {
        cfg.scheme.kind = parse_scheme(s).map_err(Failure::Config)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    if let Some(horizon) = cli.horizon {
        cfg.horizon = horizon;
    }
    cfg.scheme.dto_oracle |= cli.dto_oracle;
    cfg.validate().map_err(classify)?;
    let manifest = run_and_export(&cfg, &text, &cli.out).map_err(classify)?;
    if let Some(s) = &manifest.summary {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{} {} N={}: {} trials, {} failed, mean stabilizing time {} s, IQR {} s",
            manifest.scenario,
            manifest.scheme,
            s.horizon,
            s.trials.len(),
            s.failures,
            fmt(s.mean_stabilizing_time),
            fmt(s.iqr_stabilizing_time)
        );
    }
    println!("wrote {} files to {}", manifest.logs.len() + 1, cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Controller(m)) => {
            eprintln!("controller error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(m)) => {
            eprintln!("I/O error: {m}");
            ExitCode::from(4)
        }
    }
}
