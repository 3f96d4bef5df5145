//! `zrp`: run zero-range-process experiments described by scenario files.
//!
//! Each subcommand forces the corresponding experiment kind on the loaded
//! scenario, runs it, writes `verdicts.csv` plus any per-experiment
//! artifacts into the output directory, and exits nonzero when any verdict
//! fails.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use zrp::experiments::run_scenario;
use zrp::scenario::{ExperimentKind, Scenario};

#[derive(Parser)]
#[command(
    name = "zrp",
    about = "Experiment runner for one-dimensional zero-range processes with sitewise disorder",
    version
)]
struct Cli {
    /// Scenario file (TOML)
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Override the scenario's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the scenario's replica count
    #[arg(long, global = true)]
    replicas: Option<u64>,

    /// Output directory for verdicts.csv and artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build flux tables (annealed density, Legendre transform, envelope)
    Tables,
    /// Convergence upper bound: monotone observables against the critical
    /// product measure
    UpperBound,
    /// Subcritical current bound through the concave envelope
    Necessity,
    /// Spiked initial condition showing non-convergence for wide kernels
    Counterexample,
    /// Tail statistics of the moving-source process against the Legendre
    /// transform
    SourceHydro,
    /// Local equilibrium around an observer receding from the source
    LocalEq,
    /// Pathwise coupling audits (order preservation, current comparisons,
    /// finite propagation, label order)
    Audits,
    /// Open-segment closed form and stationarity checks
    Jackson,
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Tables => ExperimentKind::Tables,
            Command::UpperBound => ExperimentKind::UpperBound,
            Command::Necessity => ExperimentKind::Necessity,
            Command::Counterexample => ExperimentKind::Counterexample,
            Command::SourceHydro => ExperimentKind::SourceHydro,
            Command::LocalEq => ExperimentKind::LocalEquilibrium,
            Command::Audits => ExperimentKind::CouplingAudits,
            Command::Jackson => ExperimentKind::JacksonStationarity,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let path = cli
        .scenario
        .context("a scenario file is required (--scenario <file>)")?;
    let mut scenario = Scenario::load(&path)
        .with_context(|| format!("loading scenario {}", path.display()))?;
    scenario.experiment.kind = cli.command.kind();
    if let Some(seed) = cli.seed {
        scenario.seed.master = seed;
    }
    if let Some(replicas) = cli.replicas {
        scenario.experiment.replicas = replicas;
    }

    let output = run_scenario(&scenario)
        .with_context(|| format!("running {}", scenario.experiment.kind.name()))?;

    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    let verdicts_path = cli.out.join("verdicts.csv");
    std::fs::write(&verdicts_path, output.verdicts_csv())?;
    for (name, body) in &output.files {
        std::fs::write(cli.out.join(name), body)?;
    }

    let mut failed = 0usize;
    for v in &output.verdicts {
        let status = if v.pass { "pass" } else { "FAIL" };
        println!(
            "[{status}] {} :: {} value={:.6} target={:.6} tol={:.6} stderr={:.6} leaks={}",
            v.experiment, v.item, v.value, v.target, v.tolerance, v.stderr, v.leaks
        );
        if !v.pass {
            failed += 1;
        }
    }
    println!(
        "{} verdicts, {} failed; wrote {}",
        output.verdicts.len(),
        failed,
        verdicts_path.display()
    );
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
