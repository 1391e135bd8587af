use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use jumplora::config::ExperimentConfig;
use jumplora::experiment::{analyze_experiment, run_experiment, LayerSelector};
use jumplora::gradcheck::{report, run_gradcheck, GradcheckOptions};

/// Relative output directories are resolved against this root when set.
const OUTPUT_ROOT_ENV: &str = "JUMPLORA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "jumplora",
    version,
    about = "Sparse low-rank adapters for continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (order, seed) run of a config and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Runs in flight at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference gradient checks; exits 1 on any failure.
    Gradcheck {
        #[arg(long, hide = true)]
        perturb_psi: bool,
    },
    /// Per-task sparsity and prior-overlap tables from a run directory.
    Analyze {
        #[arg(long)]
        dir: PathBuf,
        /// `middle`, `all`, or a layer id such as `block1.q`.
        #[arg(long, default_value = "middle")]
        layer: LayerSelector,
    },
}

fn output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if configured.is_relative() => Path::new(&root).join(configured),
        _ => configured.to_path_buf(),
    }
}

fn cmd_run(config: &Path, jobs: usize) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let dir = output_dir(Path::new(&cfg.output_dir));
    log::info!("running {} into {}", cfg.method, dir.display());
    let outcome = run_experiment(&cfg, &dir, jobs.max(1)).with_context(|| format!("run in {}", dir.display()))?;
    let text = std::fs::read_to_string(outcome.dir.join("report.txt")).context("reading report")?;
    print!("{text}");
    println!("artifacts: {}", outcome.dir.display());
    Ok(())
}

fn cmd_gradcheck(perturb_psi: bool) -> Result<bool> {
    let results = run_gradcheck(GradcheckOptions { perturb_psi })?;
    print!("{}", report(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn cmd_analyze(dir: &Path, layer: LayerSelector) -> Result<()> {
    let written = analyze_experiment(dir, layer).with_context(|| format!("analyzing {}", dir.display()))?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, jobs } => cmd_run(&config, jobs).map(|()| true),
        Command::Gradcheck { perturb_psi } => cmd_gradcheck(perturb_psi),
        Command::Analyze { dir, layer } => cmd_analyze(&dir, layer).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
