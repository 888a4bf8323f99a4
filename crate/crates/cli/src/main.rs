use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;
mod setup;

use config::Config;
use manifest::Status;

#[derive(Parser)]
#[command(name = "nzk", version, about = "Zeroth-order optimization through its kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more runs and write their trajectories
    Train(Common),
    /// Estimate the expected kernel and compare with its closed form
    Kernel(Common),
    /// Compare training against the closed-form function dynamics
    Dynamics(Common),
    /// Run the structural checks
    Check(Common),
    /// Sweep a direction parameter over a seed ensemble
    Sweep(Common),
}

#[derive(clap::Args)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` config key
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Extra overrides, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

type Runner = fn(&Config, &Path) -> Result<commands::Outcome>;

fn run(common: &Common, runner: Runner) -> Result<bool> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        cfg.set("seed", s);
    }
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let outcome = runner(&cfg, &common.out)?;
    let verdicts = outcome.manifest.finish(&cfg.resolved())?;
    let mut ok = true;
    for v in &verdicts {
        println!("{} {}: {} ({})", v.status.to_string().to_uppercase(), v.name, v.measured, v.tolerance);
        ok &= v.status != Status::Fail;
    }
    println!("wrote {}", common.out.join("manifest").display());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, runner): (&Common, Runner) = match &cli.command {
        Command::Train(c) => (c, commands::cmd_train),
        Command::Kernel(c) => (c, commands::cmd_kernel),
        Command::Dynamics(c) => (c, commands::cmd_dynamics),
        Command::Check(c) => (c, commands::cmd_check),
        Command::Sweep(c) => (c, commands::cmd_sweep),
    };
    match run(common, runner) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
