use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod output;

use config::ConfigArgs;
use error::{CliError, Kind};
use output::Format;

/// Reference-aware quality scoring over cached video embeddings.
#[derive(Debug, Parser)]
#[command(name = "refscore", version)]
struct Cli {
    /// Output format for reports
    #[arg(long, value_enum, global = true, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus feature stores)
    Synth(SynthArgs),
    /// Train a model on the train split and save it
    Train(TrainArgs),
    /// Score a split and report SRCC, PLCC, KRCC and RMSE
    Eval(EvalArgs),
    /// Print one JSON line {id, score} per sample
    Predict(PredictArgs),
    /// Show the references retrieved for one sample
    Retrieve(RetrieveArgs),
    /// Compare analytic and finite-difference gradients of the full model
    Gradcheck(GradcheckArgs),
    /// Run the ablation matrix under the repeated-split protocol
    Ablate(AblateArgs),
    /// Reference-count statistics over a threshold sweep
    PoolStats(PoolStatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Number of prompt clusters (at least 2)
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    #[arg(long, default_value_t = 128)]
    pub prompt_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub align_dim: usize,
    /// Largest per-sample deviation scale around the cluster centroid
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Standard deviation of MOS noise
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    /// MOS range as LOW,HIGH
    #[arg(long, default_value = "0,100")]
    pub mos_scale: String,
    /// Fraction of samples labelled train
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file or dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the model file
    #[arg(long)]
    pub out: PathBuf,
    /// Include wall-clock times in the report
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest file or dataset directory; references come from its train split
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Also write per-sample id,mos,score rows here
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Manifest file or dataset directory; references come from its train split
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Manifest file or dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Query sample id
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 0.7)]
    pub tau: f64,
    /// prompt, feature, random or batch (batch falls back to random here)
    #[arg(long, default_value = "prompt")]
    pub strategy: String,
    #[arg(long)]
    pub max_refs: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub random_k: usize,
    /// Seed for the random strategy
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Manifest file or dataset directory; batches come from its train split
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    /// Samples per checked batch
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Gaussian noise added to the initial parameters
    #[arg(long, default_value_t = 0.1)]
    pub jitter: f64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Manifest file or dataset directory (split afresh for every repeat)
    #[arg(long)]
    pub data: PathBuf,
    /// Axes to cross: feature, aggregation, visual_refs, align_refs
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "feature,aggregation,visual_refs,align_refs"
    )]
    pub axes: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PoolStatsArgs {
    /// Manifest file or dataset directory; the pool is its train split
    #[arg(long)]
    pub data: PathBuf,
    /// Thresholds to report
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.6,0.7,0.8")]
    pub tau: Vec<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let f = cli.format;
    match &cli.command {
        Command::Synth(a) => commands::synth(a, f),
        Command::Train(a) => commands::train_cmd(a, f),
        Command::Eval(a) => commands::eval(a, f),
        Command::Predict(a) => commands::predict(a, f),
        Command::Retrieve(a) => commands::retrieve(a, f),
        Command::Gradcheck(a) => commands::gradcheck(a, f),
        Command::Ablate(a) => commands::ablate(a, f),
        Command::PoolStats(a) => commands::pool_stats_cmd(a, f),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new(Kind::Usage, first.trim_start_matches("error: "));
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(Kind::Usage.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.kind.code())
        }
    }
}
