//! `epiflow`: ingest surveillance data, learn spread gains, forecast,
//! evaluate and check stability.
//!
//! Exit status: 0 on success, 2 when `ingest` finds data-quality warnings,
//! 3 on any error (including invalid arguments or configuration).

mod cache;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use epiflow_core::ForecastMode;

use crate::commands::Outcome;
use crate::config::{BetaSpec, DaySpec, RunConfig};

const EXIT_WARNINGS: u8 = 2;
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "epiflow", version, about = "Conservation-law epidemic spread toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV file and write the normalized dataset and a report.
    Ingest(Common),
    /// Learn and cache gains for every day in the range.
    Learn(Common),
    /// Forecast from each anchor day in the range (default: the last day).
    Predict(Common),
    /// Rolling forecast evaluation against the recorded data.
    Eval(Common),
    /// Spectral radius timeline of active-case growth.
    Stability(Common),
    /// Train the blending network on labeled dates and evaluate the test period.
    TrainBeta(Common),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV (`date,region,total_cases,total_deaths,total_recoveries`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calendar date of day 1.
    #[arg(long)]
    epoch: Option<chrono::NaiveDate>,
    #[arg(long)]
    n_tau: Option<usize>,
    #[arg(long)]
    fit_days: Option<usize>,
    /// quarantined, interstate or blended.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ForecastMode>,
    /// fixed:<value>, network:<path> or train.
    #[arg(long)]
    beta: Option<BetaSpec>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// First day (number or ISO date).
    #[arg(long)]
    from: Option<DaySpec>,
    /// Last day (number or ISO date).
    #[arg(long)]
    to: Option<DaySpec>,
    /// national, all, or a region code.
    #[arg(long)]
    scope: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Relearn gains even when cached.
    #[arg(long)]
    force: bool,
    /// Snap network beta to 0 or 1 at 0.5.
    #[arg(long)]
    threshold: bool,
    /// Relearn gains on the extended series at every forecast step.
    #[arg(long)]
    relearn_each_step: bool,
}

fn parse_mode(s: &str) -> Result<ForecastMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("mode must be quarantined, interstate or blended, got `{s}`"))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let c = self.clone();
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = c.$field { cfg.$field = v; })* };
        }
        set!(out, n_tau, mode, beta, scope, seed);
        cfg.horizons = c.horizons.or(cfg.horizons);
        cfg.data = c.data.or(cfg.data);
        cfg.epoch = c.epoch.or(cfg.epoch);
        cfg.fit_days = c.fit_days.or(cfg.fit_days);
        cfg.from = c.from.or(cfg.from);
        cfg.to = c.to.or(cfg.to);
        cfg.jobs = c.jobs.or(cfg.jobs);
        cfg.threshold |= c.threshold;
        cfg.relearn_each_step |= c.relearn_each_step;
        cfg.resolve()
    }
}

type Handler = fn(RunConfig, bool) -> Result<Outcome>;

fn run(command: Command) -> Result<Outcome> {
    let (common, f): (Common, Handler) = match command {
        Command::Ingest(c) => (c, |cfg, _| commands::ingest_cmd(cfg)),
        Command::Learn(c) => (c, commands::learn_cmd),
        Command::Predict(c) => (c, commands::predict_cmd),
        Command::Eval(c) => (c, commands::eval_cmd),
        Command::Stability(c) => (c, commands::stability_cmd),
        Command::TrainBeta(c) => (c, commands::train_beta_cmd),
    };
    f(common.resolve()?, common.force)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Warnings) => ExitCode::from(EXIT_WARNINGS),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
