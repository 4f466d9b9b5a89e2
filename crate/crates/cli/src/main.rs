mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "odtte", version, about = "Travel-time and route learning from origin-destination records")]
struct Cli {
    /// Seed for generation and training (overrides a config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city, its oracle field, OD records and true routes.
    Gen(GenArgs),
    /// Train a model on generated or supplied OD records.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Recover routes and predict travel times for OD pairs.
    Infer(InferArgs),
    /// Export per-segment road-condition states.
    ExportConditions(ExportArgs),
    /// Run the built-in self-check suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub rows: usize,
    #[arg(long, default_value_t = 10)]
    pub cols: usize,
    #[arg(long, default_value_t = 24)]
    pub slots: usize,
    #[arg(long, default_value_t = 1000)]
    pub trips_per_slot: usize,
    /// Comma-separated slots to sample, or `peak`; all slots by default.
    #[arg(long)]
    pub only_slots: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `gen` (network.json, od_train_s*.csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key = value` training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint (normally `last.ckpt`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override a config entry, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config supplying search thresholds and the validation split.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace the learned field with the oracle field from `oracle.csv`.
    #[arg(long)]
    pub plant_oracle: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Directory holding network.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// OD file in the `od_train` layout; `observed_T` is ignored.
    #[arg(long, conflicts_with_all = ["origin", "dest"])]
    pub od: Option<PathBuf>,
    #[arg(long, requires = "dest")]
    pub origin: Option<usize>,
    #[arg(long, requires = "origin")]
    pub dest: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub slot: usize,
    #[arg(long, default_value_t = 0)]
    pub weather: usize,
    #[arg(long, default_value_t = 0)]
    pub holiday: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model to export; the oracle field is exported when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated slots; all by default.
    #[arg(long)]
    pub slots: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub weather: usize,
    #[arg(long, default_value_t = 0)]
    pub holiday: usize,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "quick")]
    pub level: odtte::verify::Level,
    /// Break the tanh backward rule first, to show the gradient suite notices.
    #[arg(long, hide = true)]
    pub inject_tanh_fault: bool,
}

pub struct Global {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    let global = Global { seed: cli.seed, out: cli.out };
    let result = pool.install(|| match cli.command {
        Command::Gen(a) => commands::gen(&global, &a),
        Command::Train(a) => commands::train(&global, &a),
        Command::Eval(a) => commands::eval(&global, &a),
        Command::Infer(a) => commands::infer(&global, &a),
        Command::ExportConditions(a) => commands::export_conditions(&global, &a),
        Command::Verify(a) => commands::verify(&global, &a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
