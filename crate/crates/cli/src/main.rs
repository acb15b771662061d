//! `tvrp`: instance generation, training, solving, box simulation, the
//! exhaustive oracle, gradient checks and evaluation.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 resource
//! guard, 4 stalled execution.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvrp_core::format::FormatError;
use tvrp_core::generate::GenError;
use tvrp_core::oracle::OracleError;
use tvrp_policy::PolicyError;
use tvrp_train::TrainError;
use tvrp_workflow::WorkflowError;

use crate::config::ConfigError;
use crate::manifest::{hash_file, Manifest, MANIFEST_FILE};

/// Environment variable holding the worker thread count.
const WORKERS_VAR: &str = "TVRP_WORKERS";

#[derive(Parser)]
#[command(name = "tvrp", version, about = "Multi-truck routing with tensor demand")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set policy.heads=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for results and the manifest.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random or synthetic instance.
    Gen(Common),
    /// Train a policy; writes a checkpoint and metrics.
    Train(Common),
    /// Route an instance with a trained policy via the execution loop.
    Solve(Common),
    /// Replay routes with discrete boxes and report fulfillment.
    Simulate(Common),
    /// Exhaustive optimum of a tiny single-truck instance.
    Oracle(Common),
    /// Finite-difference check of policy gradients.
    Gradcheck(Common),
    /// Greedy evaluation of a checkpoint on an instance set.
    Eval(Common),
    /// Repeat a run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Fail unless every output hashes to the manifest's value.
        #[arg(long)]
        verify: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_workers() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(WORKERS_VAR) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| ConfigError(format!("{WORKERS_VAR} must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(ConfigError(format!("{WORKERS_VAR} must be positive")).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    let (name, common) = match command {
        Command::Gen(c) => ("gen", c),
        Command::Train(c) => ("train", c),
        Command::Solve(c) => ("solve", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Oracle(c) => ("oracle", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Eval(c) => ("eval", c),
        Command::Rerun { manifest, out, verify } => return rerun(&manifest, &out, verify),
    };
    let config = commands::resolve(name, common.config.as_deref(), &common.overrides)?;
    commands::execute(name, &config, &common.out)?;
    eprintln!("wrote {}", common.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn rerun(path: &Path, out: &Path, verify: bool) -> anyhow::Result<()> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let old = Manifest::read(&path)?;
    for (name, input) in &old.inputs {
        let now = hash_file(&input.path)?;
        if now != input.sha256 {
            return Err(ConfigError(format!("input `{name}` ({}) changed since the recorded run", input.path.display())).into());
        }
    }
    let new = commands::execute(&old.command, &old.config, out)?;
    if verify {
        if new.outputs != old.outputs {
            let differing: Vec<&String> = old.outputs.keys().filter(|k| new.outputs.get(*k) != old.outputs.get(*k)).collect();
            anyhow::bail!("rerun outputs differ from the manifest: {differing:?}");
        }
        eprintln!("all {} outputs match the manifest", new.outputs.len());
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() || cause.is::<FormatError>() || cause.is::<GenError>() {
            return 2;
        }
        if cause.is::<OracleError>() {
            return 3;
        }
        if let Some(p) = cause.downcast_ref::<PolicyError>() {
            return policy_code(p);
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return train_code(t);
        }
        if let Some(w) = cause.downcast_ref::<WorkflowError>() {
            return match w {
                WorkflowError::Config(_) | WorkflowError::Instance(_) => 2,
                WorkflowError::Stalled { .. } | WorkflowError::IterationLimit { .. } => 4,
                WorkflowError::Rollout(t) => train_code(t),
            };
        }
    }
    1
}

fn policy_code(e: &PolicyError) -> u8 {
    match e {
        PolicyError::TensorTooLarge { .. } => 3,
        PolicyError::Config(_) | PolicyError::Checkpoint(_) | PolicyError::TruckCount { .. } => 2,
        _ => 1,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) | TrainError::Gen(_) => 2,
        TrainError::Policy(p) => policy_code(p),
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        let too_large = PolicyError::TensorTooLarge { nodes: 30, rank: 3, width: 3, values: 1, limit: 0 };
        assert_eq!(exit_code(&anyhow::Error::new(TrainError::Policy(too_large)).context("training")), 3);
        let stalled = WorkflowError::Stalled { iterations: 5, remaining: 1.0 };
        assert_eq!(exit_code(&anyhow::Error::new(stalled)), 4);
        assert_eq!(exit_code(&ConfigError("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::Error::new(PolicyError::Checkpoint("version".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
