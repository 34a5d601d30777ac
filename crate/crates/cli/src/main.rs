//! Batch front end: calibrate, plan, simulate, frontier, ingest, advise.
//!
//! Exit codes: 0 success, 1 input error, 2 constraint missed, 3 approval of a
//! rejected proposal.

mod commands;
mod state;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "costintel", version, about = "Cost-aware planning and simulation for elastic query execution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Hardware profile (JSON).
    #[arg(long, global = true)]
    pub hw: Option<PathBuf>,
    /// Overrides the scenario seed; 0 disables timing jitter.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Applied tuning actions; read by simulate and frontier, written by
    /// advise --approve.
    #[arg(long, global = true)]
    pub state: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Fit scalability models to measured samples.
    Calibrate {
        /// JSON array of calibration samples.
        #[arg(long)]
        samples: PathBuf,
        /// Node price for a profile built from scratch (ignored with --hw).
        #[arg(long, default_value_t = 1.0)]
        node_price: f64,
    },
    /// Choose per-pipeline DOPs (and a bushy variant) for a plan.
    Plan {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        constraint: PathBuf,
    },
    /// Plan, then replay against the scenario's true cardinalities.
    #[command(alias = "run")]
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        constraint: PathBuf,
        #[arg(long, default_value_t = 1.25)]
        theta_local: f64,
        #[arg(long, default_value_t = 2.0)]
        theta_replan: f64,
        #[arg(long, default_value_t = 4)]
        check_every: u32,
    },
    /// Sweep latency targets and emit the non-dominated (latency, dollars) points.
    Frontier {
        #[arg(long)]
        plan: PathBuf,
        /// Latency targets in seconds, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sla: Vec<f64>,
        #[arg(long, default_value_t = 256)]
        dop_max: u32,
        #[arg(long, default_value_t = 0)]
        k_max: usize,
    },
    /// Fold a newline-delimited trace log into a workload summary.
    Ingest {
        #[arg(long)]
        traces: PathBuf,
        /// Existing summary to extend.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Price a tuning proposal against the predicted workload.
    Advise {
        #[arg(long)]
        proposal: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        /// Directory of template plans (`*.plan` shorthand or `*.json`).
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        /// Prediction horizon in hours; defaults to the amortization horizon.
        #[arg(long)]
        horizon: Option<f64>,
        /// Record the action in the state file when it is accepted.
        #[arg(long)]
        approve: bool,
    },
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Input(anyhow::Error),
    Missed(String),
    Rejected(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::Calibrate { samples, node_price } => commands::calibrate(c, &samples, node_price),
        Command::Plan { plan, constraint } => commands::plan(c, &plan, &constraint),
        Command::Simulate {
            scenario,
            constraint,
            theta_local,
            theta_replan,
            check_every,
        } => {
            let policy = costintel::exec::MonitorPolicy {
                theta_local,
                theta_replan,
                check_every_morsels: check_every,
            };
            commands::simulate(c, &scenario, &constraint, &policy)
        }
        Command::Frontier { plan, sla, dop_max, k_max } => commands::frontier(c, &plan, &sla, dop_max, k_max),
        Command::Ingest { traces, summary } => commands::ingest(c, &traces, summary.as_deref()),
        Command::Advise {
            proposal,
            summary,
            plans,
            prices,
            horizon,
            approve,
        } => commands::advise(c, &proposal, &summary, &plans, &prices, horizon, approve),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Missed(m)) => {
            eprintln!("constraint missed: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Rejected(m)) => {
            eprintln!("not applied: {m}");
            ExitCode::from(3)
        }
    }
}
