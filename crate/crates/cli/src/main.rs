mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use longsom::analysis::ProbeConfig;
use longsom::synth::CohortSpec;
use longsom::trainer::TrainConfig;
use serde::Serialize;

const PRECEDENCE: &str = "Training settings resolve as: command-line flags, then the --config file, then built-in defaults.";

#[derive(Parser)]
#[command(name = "longsom", version, about = "Train and analyze longitudinal self-organizing-map representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort CSV.
    Gen(GenArgs),
    /// Train a model on a cohort; writes a run directory.
    #[command(after_help = PRECEDENCE)]
    Train(TrainArgs),
    /// Similarity grids, distance correlations, PCA projection and heatmaps for a run.
    Analyze(AnalyzeArgs),
    /// Cross-validated downstream probes on a run's frozen encoder.
    Probe(ProbeArgs),
    /// Train the reference objective next to hard-assignment and/or no-direction variants.
    #[command(after_help = PRECEDENCE)]
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output CSV path.
    #[arg(long, default_value = "cohort.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = CohortSpec::default().n_subjects)]
    pub subjects: usize,
    #[arg(long, default_value_t = CohortSpec::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = CohortSpec::default().input_dim)]
    pub input_dim: usize,
    #[arg(long, default_value_t = CohortSpec::default().min_visits)]
    pub min_visits: usize,
    #[arg(long, default_value_t = CohortSpec::default().max_visits)]
    pub max_visits: usize,
    /// Per-visit observation noise.
    #[arg(long, default_value_t = CohortSpec::default().noise_sigma)]
    pub noise_sigma: f64,
    /// Scale of the static per-subject offset.
    #[arg(long, default_value_t = CohortSpec::default().subject_sigma)]
    pub subject_sigma: f64,
    /// Overall scale applied to every observation.
    #[arg(long, default_value_t = CohortSpec::default().observation_scale)]
    pub observation_scale: f64,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

/// Optional overrides for every `TrainConfig` field. Field names match the
/// config keys; help text gains the defaults at startup.
#[derive(Args, Serialize, Default)]
pub struct ConfigFlags {
    #[arg(long)]
    lambda_commit: Option<f64>,
    #[arg(long)]
    lambda_som: Option<f64>,
    #[arg(long)]
    lambda_dir: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Reconstruction-only epochs before the SOM is initialized.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Epochs of the full objective.
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Smoothing factor of the reference trajectories.
    #[arg(long)]
    ema_alpha: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    grid_rows: Option<usize>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long, value_parser = ["soft", "hard"])]
    weight_scheme: Option<String>,
    /// Intermediate checkpoint period in epochs; 0 keeps only the final one.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Standard deviation of Gaussian input noise during training.
    #[arg(long)]
    augment_noise: Option<f64>,
    /// Mirror the grid so trajectories point toward higher indices.
    #[arg(long)]
    orient_grid: Option<bool>,
}

#[derive(Args)]
pub struct RunLocation {
    /// Directory under which the timestamped run directory is created.
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
    /// Exact run directory, instead of a timestamped one under --runs-root.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Cohort CSV produced by `gen`.
    #[arg(long)]
    pub cohort: PathBuf,
    /// JSON file with any subset of training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[command(flatten)]
    pub location: RunLocation,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Include the hard-assignment variant.
    #[arg(long)]
    pub hard: bool,
    /// Include the variant without the direction term.
    #[arg(long)]
    pub no_dir: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[command(flatten)]
    pub location: RunLocation,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Number of equal-count chronological age bins.
    #[arg(long, default_value_t = 4)]
    pub age_bins: usize,
    /// Replace an existing analysis directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().folds)]
    pub folds: usize,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = ProbeConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = ProbeConfig::default().seed)]
    pub seed: u64,
    /// Replace an existing probe directory.
    #[arg(long)]
    pub force: bool,
}

/// Appends `[default: ...]` to each config flag's help, read from
/// `TrainConfig::default()` so the two cannot drift apart.
fn with_config_defaults(cmd: clap::Command) -> clap::Command {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let map = defaults.as_object().expect("config is an object").clone();
    let annotate = |mut sub: clap::Command| {
        for (key, value) in &map {
            let shown = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(a) => a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                v => v.to_string(),
            };
            sub = sub.mut_arg(key.as_str(), |a| {
                let help = a.get_help().map(|h| format!("{h} ")).unwrap_or_default();
                a.help(format!("{help}[default: {shown}]"))
            });
        }
        sub
    };
    cmd.mut_subcommand("train", annotate).mut_subcommand("ablate", annotate)
}

fn main() -> ExitCode {
    let matches = with_config_defaults(Cli::command()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their cause; skip repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
