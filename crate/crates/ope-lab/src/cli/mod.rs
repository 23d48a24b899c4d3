//! Command-line surface of the `ope-lab` binary.
//!
//! Each subcommand accepts a flat key=value config file via `--config`;
//! individual flags override file values. All randomized subcommands require
//! an explicit seed.

pub mod commands;
pub mod config;
pub mod csvio;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::Result;
use commands::CommandOutput;
use config::KeyValues;

#[derive(Debug, Parser)]
#[command(
    name = "ope-lab",
    version,
    about = "Off-policy evaluation experiments: least-squares policy evaluation, \
             hard-instance generation, coverage diagnostics, and sample-complexity sweeps"
)]
pub struct Cli {
    /// Worker pool size for sweeps (default: number of processors).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a hard instance, audit its assumptions, and export its tables.
    Instance(InstanceArgs),
    /// Draw an offline dataset from a hard instance.
    Sample(SampleArgs),
    /// Run least-squares policy evaluation and report the error bound.
    Lspe(LspeArgs),
    /// Compare empirical feature covariances to their exact counterparts.
    Diagnose(DiagnoseArgs),
    /// Required-sample growth over levels plus Monte-Carlo error rates.
    LowerSweep(LowerSweepArgs),
    /// Solver error curves on instances satisfying low distribution shift.
    UpperSweep(UpperSweepArgs),
}

/// Flags shared by every subcommand that builds a hard instance.
#[derive(Debug, Args)]
pub struct SpecFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m: Option<u64>,
    /// Number of levels (config key `L`).
    #[arg(long = "L", visible_alias = "levels")]
    pub levels: Option<u64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Select the zero-reward hypothesis.
    #[arg(long)]
    pub r0_zero: bool,
    /// Base of the derived construction; use together with --d.
    #[arg(long)]
    pub b: Option<f64>,
    /// Feature dimension for the derived construction; use together with --b.
    #[arg(long)]
    pub d: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
}

impl SpecFlags {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::from_file(path)?,
            None => KeyValues::default(),
        };
        kv.set_opt("gamma", &self.gamma);
        kv.set_opt("m", &self.m);
        kv.set_opt("L", &self.levels);
        kv.set_opt("q", &self.q);
        kv.set_opt("eps", &self.eps);
        if self.r0_zero {
            kv.set("r0_zero", "true".into());
        }
        kv.set_opt("b", &self.b);
        kv.set_opt("d", &self.d);
        kv.set_opt("out", &self.out);
        Ok(kv)
    }
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    #[command(flatten)]
    pub spec: SpecFlags,
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub spec: SpecFlags,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LspeArgs {
    #[command(flatten)]
    pub spec: SpecFlags,
    /// Path to a dataset CSV; when absent, --n and --seed sample one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Ridge weight; defaults to the theoretical schedule.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub spec: SpecFlags,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LowerSweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m: Option<u64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub target_error: Option<f64>,
    #[arg(long)]
    pub l_min: Option<u64>,
    #[arg(long)]
    pub l_max: Option<u64>,
    #[arg(long)]
    pub mc_levels: Option<u64>,
    #[arg(long)]
    pub mc_target: Option<f64>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct UpperSweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `tabular` (random one-hot instances) or `scalar` (single-state oracle).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub n_states: Option<u64>,
    #[arg(long)]
    pub n_actions: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
    #[arg(long)]
    pub instances: Option<u64>,
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Comma-separated dataset sizes.
    #[arg(long)]
    pub n_grid: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub t: Option<u64>,
    #[arg(long)]
    pub t_max: Option<u64>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
}

fn base_kv(config: &Option<PathBuf>) -> Result<KeyValues> {
    match config {
        Some(path) => KeyValues::from_file(path),
        None => Ok(KeyValues::default()),
    }
}

/// Dispatches a parsed command.
pub fn run(command: &Command) -> Result<CommandOutput> {
    match command {
        Command::Instance(args) => {
            let mut kv = args.spec.key_values()?;
            kv.set_opt("eta", &args.eta);
            commands::run_instance(kv)
        }
        Command::Sample(args) => {
            let mut kv = args.spec.key_values()?;
            kv.set_opt("n", &args.n);
            kv.set_opt("seed", &args.seed);
            commands::run_sample(kv)
        }
        Command::Lspe(args) => {
            let mut kv = args.spec.key_values()?;
            kv.set_opt(
                "dataset",
                &args.dataset.as_ref().map(|p| p.display().to_string()),
            );
            kv.set_opt("n", &args.n);
            kv.set_opt("seed", &args.seed);
            kv.set_opt("t", &args.t);
            kv.set_opt("delta", &args.delta);
            kv.set_opt("eta", &args.eta);
            kv.set_opt("lambda", &args.lambda);
            commands::run_lspe_cmd(kv)
        }
        Command::Diagnose(args) => {
            let mut kv = args.spec.key_values()?;
            kv.set_opt("n", &args.n);
            kv.set_opt("seed", &args.seed);
            kv.set_opt("delta", &args.delta);
            kv.set_opt("eta", &args.eta);
            commands::run_diagnose(kv)
        }
        Command::LowerSweep(args) => {
            let mut kv = base_kv(&args.config)?;
            kv.set_opt("gamma", &args.gamma);
            kv.set_opt("m", &args.m);
            kv.set_opt("q", &args.q);
            kv.set_opt("eps", &args.eps);
            kv.set_opt("target_error", &args.target_error);
            kv.set_opt("l_min", &args.l_min);
            kv.set_opt("l_max", &args.l_max);
            kv.set_opt("mc_levels", &args.mc_levels);
            kv.set_opt("mc_target", &args.mc_target);
            kv.set_opt("trials", &args.trials);
            kv.set_opt("seed", &args.seed);
            kv.set_opt("out", &args.out);
            commands::run_lower_sweep(kv)
        }
        Command::UpperSweep(args) => {
            let mut kv = base_kv(&args.config)?;
            kv.set_opt("mode", &args.mode);
            kv.set_opt("n_states", &args.n_states);
            kv.set_opt("n_actions", &args.n_actions);
            kv.set_opt("gamma", &args.gamma);
            kv.set_opt("reward_scale", &args.reward_scale);
            kv.set_opt("instances", &args.instances);
            kv.set_opt("seeds", &args.seeds);
            kv.set_opt("n_grid", &args.n_grid);
            kv.set_opt("delta", &args.delta);
            kv.set_opt("eta", &args.eta);
            kv.set_opt("t", &args.t);
            kv.set_opt("t_max", &args.t_max);
            kv.set_opt("n", &args.n);
            kv.set_opt("seed", &args.seed);
            kv.set_opt("out", &args.out);
            commands::run_upper_sweep(kv)
        }
    }
}
