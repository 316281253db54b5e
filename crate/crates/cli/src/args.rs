use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "sparsealloc",
    version,
    about = "Train and evaluate allocation-policy sparse autoencoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic SAEACT01 activation file and its ground-truth sidecar.
    GenData(GenDataArgs),
    /// Train one run and write its artifacts under the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an activation file.
    Eval(EvalArgs),
    /// Fit a Zipf curve to a density CSV.
    FitZipf(FitZipfArgs),
    /// Train several recipes over several seeds and tabulate the results.
    Compare(CompareArgs),
    /// Emit plot-ready CSVs from a run directory and/or a compare table.
    ExportPlots(ExportPlotsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth sidecar path; defaults to `<out>.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub true_features: Option<usize>,
    #[arg(long)]
    pub zipf_alpha: Option<f64>,
    #[arg(long)]
    pub zipf_beta: Option<f64>,
    #[arg(long)]
    pub mean_active: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub easy_row_rate: Option<f64>,
}

/// Field overrides applied on top of `--config` or `--preset`.
#[derive(Debug, Args, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long = "out", alias = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// token-choice | feature-choice | mutual-choice | relu
    #[arg(long)]
    pub policy: Option<String>,
    /// by-value | by-magnitude
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub rectify: Option<bool>,
    #[arg(long)]
    pub width_multiple: Option<usize>,
    #[arg(long)]
    pub expected_k: Option<f64>,
    #[arg(long)]
    pub expected_k_ratio: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub lr_n_ref: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_sparsity: Option<f64>,
    #[arg(long)]
    pub lambda_aux_k: Option<f64>,
    #[arg(long)]
    pub lambda_aux_zipf: Option<f64>,
    #[arg(long)]
    pub lambda_nfm: Option<f64>,
    #[arg(long)]
    pub lambda_nfm_inf: Option<f64>,
    #[arg(long)]
    pub k_aux: Option<usize>,
    #[arg(long)]
    pub zipf_alpha: Option<f64>,
    #[arg(long)]
    pub zipf_beta: Option<f64>,
    #[arg(long)]
    pub m_max: Option<usize>,
    #[arg(long)]
    pub fix_alpha: Option<f64>,
    #[arg(long)]
    pub window_tokens: Option<u64>,
    #[arg(long)]
    pub dead_threshold_tokens: Option<u64>,
    #[arg(long)]
    pub refit_interval: Option<usize>,
    #[arg(long)]
    pub phase2: Option<bool>,
    #[arg(long)]
    pub phase2_steps: Option<usize>,
    #[arg(long)]
    pub early_stop: Option<bool>,
    #[arg(long)]
    pub shuffle_buffer_tokens: Option<usize>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    #[arg(long)]
    pub save_optimizer: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; missing fields take the desk defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// desk | smoke | paper | paper-ratio
    #[arg(long)]
    pub preset: Option<String>,
    /// tc | mc | mc-fc | fc. Applied after the field overrides: sets the
    /// policy and aux weights and splits `--steps` between the phases.
    #[arg(long)]
    pub recipe: Option<String>,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Defaults to the batch size the checkpoint was trained with.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Evaluate at most this many leading rows; all rows when omitted.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Calibrate per-feature thresholds on the leading batches, then
    /// evaluate token by token with them.
    #[arg(long)]
    pub streaming: bool,
    #[arg(long, default_value_t = 4)]
    pub calibration_batches: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitZipfArgs {
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub fix_alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated recipes.
    #[arg(long, value_delimiter = ',', default_value = "tc,mc,mc-fc,fc")]
    pub recipes: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// CSV output path.
    #[arg(long = "csv")]
    pub csv: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct ExportPlotsArgs {
    /// Run directory holding report.json and densities_final.csv.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Table written by `compare`.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
