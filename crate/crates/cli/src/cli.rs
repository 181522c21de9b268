//! Argument parsing and command dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cvar_sgd_core::objective::{cvar_sorted, cvar_variational};
use cvar_sgd_core::ConfidenceLevel;

use crate::config::ExperimentConfig;
use crate::diagnose::{diagnose, write_report};
use crate::error::CliError;
use crate::experiment::{execute, log, write_outputs, Context};
use crate::output::fmt_f64;

#[derive(Debug, Parser)]
#[command(name = "cvar-sgd", version, about = "CV@R learning by stochastic gradient descent")]
pub struct Cli {
    /// Experiment configuration (TOML); defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `sgd.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `experiment.output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppresses progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs CV@R-SGD and the LMS baseline over all seeds.
    Run,
    /// Checks convergence conditions against completed runs.
    Diagnose {
        /// Produce the runs first instead of reading existing traces.
        #[arg(long)]
        run: bool,
    },
    /// Prints the empirical CV@R of a file with one number per line.
    Cvar {
        file: PathBuf,
        #[arg(long)]
        alpha: f64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sgd.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.output_dir = out.clone();
    }
    cfg.resolved()
}

fn cmd_run(cfg: ExperimentConfig, quiet: bool) -> Result<Context, CliError> {
    let dir = cfg.experiment.output_dir.clone();
    let out = execute(cfg, quiet)?;
    write_outputs(&out, &dir)?;
    log(quiet, format!("wrote {}", dir.display()));
    Ok(out.ctx)
}

fn cmd_diagnose(cfg: ExperimentConfig, inline_run: bool, quiet: bool) -> Result<(), CliError> {
    let dir = cfg.experiment.output_dir.clone();
    let ctx = if inline_run {
        cmd_run(cfg, quiet)?
    } else {
        Context::prepare(cfg)?
    };
    let report = diagnose(&ctx, &dir, quiet)?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_report(&report, &dir)?;
    log(quiet, format!("wrote {}", dir.join("report.json").display()));
    Ok(())
}

fn cmd_cvar(file: &PathBuf, alpha: f64) -> Result<String, CliError> {
    let alpha = ConfidenceLevel::new(alpha).map_err(|e| CliError::Config(format!("--alpha: {e}")))?;
    let text = std::fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
    let samples = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Io(format!("{}: line {}: not a finite number: {l:?}", file.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(CliError::Io(format!("{}: no samples", file.display())));
    }
    let sorted = cvar_sorted(&samples, alpha)?;
    let (variational, _) = cvar_variational(&samples, alpha, 1e-12)?;
    Ok(format!(
        "cvar_sorted {}\ncvar_variational {}\ndifference {}\n",
        fmt_f64(sorted),
        fmt_f64(variational),
        fmt_f64(variational - sorted)
    ))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Cvar { file, alpha } => {
            print!("{}", cmd_cvar(file, *alpha)?);
            Ok(())
        }
        Command::Run => cmd_run(load_config(&cli)?, cli.quiet).map(|_| ()),
        Command::Diagnose { run } => cmd_diagnose(load_config(&cli)?, *run, cli.quiet),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
