//! Command-line front end: one TOML configuration file drives planning,
//! closed-loop simulation, the experiment presets, dataset generation and
//! value-model training. All randomness flows from the global `--seed`, and
//! `--deterministic` swaps wall-clock planner budgets for iteration budgets
//! so reruns are byte-identical.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gaitplan",
    version,
    about = "Non-gaited contact planning for quadruped locomotion"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, default_value = "gaitplan.toml")]
    config: PathBuf,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to `paths.out`, then the working
    /// directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace wall-clock planner budgets with iteration budgets.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan one contact schedule from a standing start.
    Plan,
    /// Run one closed-loop episode and write its metrics.
    Simulate,
    /// Sweep one planner knob over the push protocol.
    Ablate,
    /// Run one comparison preset.
    Compare,
    /// Generate value-model training data from planned episodes.
    GenDataset,
    /// Train the value model on a dataset.
    TrainVf,
    /// Evaluate a model file on a dataset.
    EvalVf,
}

fn run(cli: &Cli) -> Result<(), commands::CliError> {
    let cfg = config::load(&cli.config, cli.seed, cli.deterministic)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Plan => commands::plan_cmd(&cfg, &out),
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Ablate => commands::ablate(&cfg, &out),
        Command::Compare => commands::compare(&cfg, &out),
        Command::GenDataset => commands::gen_dataset(&cfg, &out),
        Command::TrainVf => commands::train_vf(&cfg, &out),
        Command::EvalVf => commands::eval_vf(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
