mod commands;
mod config;
mod data;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "diffdrive", version, about = "Closed-loop driving policy training on synthetic logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; later layers are env vars, --set, then flags.
    #[arg(long, env = "DIFFDRIVE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Thread count; 0 uses every core, 1 runs single threaded.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ours,
    Bc,
    BcPerturb,
    MsPrediction,
}

impl MethodArg {
    pub fn config_name(self) -> &'static str {
        match self {
            MethodArg::Ours => "ours",
            MethodArg::Bc => "bc",
            MethodArg::BcPerturb => "bc_perturb",
            MethodArg::MsPrediction => "ms_prediction",
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Rollout horizon.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<usize>,
    /// Leading rollout steps excluded from the loss.
    #[arg(long = "K", value_name = "K")]
    pub discard: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub use_sdv_history: Option<bool>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlannerArg {
    /// Replays the logged increments.
    ExpertOracle,
    /// The trained policy in the run directory or --checkpoint.
    Network,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Alpha,
    Beta,
    #[value(name = "K")]
    K,
    DataFraction,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenario logs and a train/test manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_scenarios: Option<usize>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a policy with one of the four methods.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Closed-loop evaluation on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "network")]
        planner: PlannerArg,
        /// Policy or training checkpoint; defaults to the run's policy.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        offroad_threshold: Option<f64>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Draw scenario frames as SVG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Scenario file; otherwise --index selects from --split.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Overlay this policy's closed-loop trajectory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Half-open frame range START..END.
        #[arg(long)]
        frames: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
