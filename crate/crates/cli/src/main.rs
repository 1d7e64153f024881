mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  I/O or other failure
  2  invalid configuration or arguments
  3  invalid or unusable data
  4  training diverged (non-finite loss)
  5  checkpoint was produced under a different configuration";

#[derive(Parser)]
#[command(name = "stun", version, about = "Uncertainty-aware place recognition: train, evaluate and compare", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults to the desk-scale configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Relative paths are resolved against STUN_OUT_ROOT when it is set.
    #[arg(long)]
    pub out: PathBuf,
    /// Output root for relative --out paths.
    #[arg(long, env = "STUN_OUT_ROOT", hide_env_values = true)]
    pub out_root: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    /// Number of uncertainty bins for ECE and reliability diagrams.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Retrieval depth.
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Baseline {
    McDropout,
    Pfe,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic geo-tagged dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Synthetic data specification (TOML); defaults to 50 places x 10 samples.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the deterministic teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the student (mean and variance) from a teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train an MC Dropout or PFE baseline. PFE needs a teacher checkpoint.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        baseline: Baseline,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query split and write metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Match with the mutual likelihood score (PFE checkpoints only).
        #[arg(long)]
        mls_match: bool,
    },
    /// Render reliability, precision-recall and removal curves from metrics.json.
    Plot {
        /// Metrics report written by `evaluate`.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "STUN_OUT_ROOT", hide_env_values = true)]
        out_root: Option<PathBuf>,
    },
    /// Evaluate several checkpoints on the same queries and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoints, one row each, in order. Repeat the flag.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        /// Adds a "PFE w/ MLS" row after every PFE checkpoint.
        #[arg(long)]
        mls_match: bool,
    },
    /// Generate data, train every method, evaluate, compare and plot.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also train and evaluate the MC Dropout and PFE baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, spec } => commands::generate(&common, spec.as_deref()).map(|_| ()),
        Command::TrainTeacher { common, data } => commands::train_teacher(&common, &data).map(|_| ()),
        Command::TrainStudent { common, data, ckpt } => commands::train_student(&common, &data, &ckpt).map(|_| ()),
        Command::TrainBaseline {
            common,
            data,
            baseline,
            ckpt,
        } => commands::train_baseline(&common, &data, baseline, ckpt.as_deref()).map(|_| ()),
        Command::Evaluate {
            common,
            eval,
            data,
            ckpt,
            mls_match,
        } => commands::evaluate(&common, &eval, &data, &ckpt, mls_match).map(|_| ()),
        Command::Plot { metrics, out, out_root } => commands::plot(&metrics, &out, out_root.as_deref()),
        Command::Compare {
            common,
            eval,
            data,
            ckpt,
            mls_match,
        } => commands::compare(&common, &eval, &data, &ckpt, mls_match),
        Command::Run {
            common,
            eval,
            spec,
            baselines,
        } => commands::run(&common, &eval, spec.as_deref(), baselines),
        Command::ShowConfig { config, seed } => commands::show_config(config.as_deref(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
