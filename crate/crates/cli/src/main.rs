//! `bubblebloch`: band sweeps, effective tensors, gap classification, field
//! reconstruction and oracle validation for a periodic bubbly crystal.

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod band;
mod config;
mod field;
mod gap;
mod kernel;
mod output;
mod run;
mod tensor;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bubblebloch::vec3::Vec3;
use clap::{Parser, Subcommand};

use config::{ModeArg, RunConfig, UsageError};
use run::Run;

#[derive(Parser, Debug)]
#[command(name = "bubblebloch", version, about = "Subwavelength band structure of bubbly crystals")]
struct Cli {
    /// TOML run configuration (defaults describe the reference sphere).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `sweep.mode`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Reserved; every computation is deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// First band over the configured grid or path.
    Band,
    /// Effective tensor with a finite-difference Hessian cross check.
    Tensor,
    /// Classify a frequency against the corner frequency.
    Gap {
        #[arg(long)]
        omega: Option<f64>,
        /// Frequency as a multiple of omega*.
        #[arg(long)]
        ratio: Option<f64>,
        /// Reuse a `model.json` written by `tensor`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Two-scale field along the configured probe line.
    Field {
        /// Overrides `field.alpha_tilde`, as `a1,a2,a3`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        alpha_tilde: Option<Vec<f64>>,
    },
    /// Oracle cross checks with a pass/fail line per check.
    Validate,
    /// Dump lattice Green function values on a probe grid.
    #[command(hide = true)]
    Kernel {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        k: f64,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
}

fn vec3_arg(v: &[f64]) -> Result<Vec3> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(UsageError(format!("expected three comma-separated components, got {}", v.len())).into()),
    }
}

fn execute(cli: Cli) -> Result<bool> {
    if cli.seed.is_some() {
        log::debug!("--seed has no effect");
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.sweep.mode = m;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let run = Run::new(cfg, out)?;
    match cli.command {
        Command::Band => band::cmd_band(&run),
        Command::Tensor => tensor::cmd_tensor(&run),
        Command::Gap { omega, ratio, model } => gap::cmd_gap(&run, omega, ratio, model.as_deref()),
        Command::Field { alpha_tilde } => field::cmd_field(&run, alpha_tilde.as_deref().map(vec3_arg).transpose()?),
        Command::Validate => validate::cmd_validate(&run),
        Command::Kernel { alpha, k, n } => kernel::cmd_kernel(&run, vec3_arg(&alpha)?, k, n),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
