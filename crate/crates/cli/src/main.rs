use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use servicetime::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "servicetime",
    version,
    about = "Service-time prediction for municipal service requests"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.output`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the raw export, write the cleaned log, region map and panel.
    Ingest,
    /// Score request descriptions and write `workloads.csv`.
    ScoreWorkloads,
    /// Train one model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Train every requested variant and compare them.
    Ablate(AblateArgs),
    /// Train the full model once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Exploratory tables and charts of the request log.
    Analyze,
    /// Generate a synthetic request log.
    Simulate(SimulateArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
    /// Predict a single request given as JSON.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Overrides `train.variant` (full, -t, -ct, -v).
    #[arg(long, allow_hyphen_values = true)]
    variant: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Defaults to `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,-t,-ct,-v",
        allow_hyphen_values = true
    )]
    variants: Vec<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// One of T (window), learning_rate, hidden_width, model_dim, alpha.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Give every request type its own department.
    #[arg(long)]
    separate_departments: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Request body; `-` or absent reads standard input.
    #[arg(long)]
    json: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            eprintln!("error: {e:#}");
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
