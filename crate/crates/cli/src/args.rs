use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cludi_core::{InferenceConfig, TrainConfig};
use serde::de::DeserializeOwned;

#[derive(Parser, Debug)]
#[command(name = "cludi", version, about = "Clustering by conditional diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded Gaussian-mixture dataset (CLDF, or CSV for a .csv path).
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a history CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset; prints a JSON report per B.
    Eval(EvalArgs),
    /// Write averaged cluster probabilities and labels as CSV.
    Infer(PredictArgs),
    /// Write per-item mean sampled embeddings as CSV.
    ExportEmbeddings(PredictArgs),
    /// Train once per grid value and record the best metrics of each run.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub dim: usize,
    /// Samples per component.
    #[arg(long)]
    pub per: usize,
    #[arg(long)]
    pub radius: f64,
    #[arg(long)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Feature file: CLDF, or CSV when the name ends in `.csv`.
    #[arg(long)]
    pub data: PathBuf,
    /// The CSV's last column holds integer labels.
    #[arg(long)]
    pub labels: bool,
    /// Scale every feature column to mean 0 and standard deviation 1.
    #[arg(long)]
    pub standardize: bool,
}

/// Sampling flags for commands that only run inference.
#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    /// Points on the reverse time grid.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
}

impl SamplingArgs {
    pub fn config(&self) -> InferenceConfig {
        InferenceConfig {
            b: InferenceConfig::default().b,
            steps: self.steps,
            seed: self.seed,
            eta: self.eta,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Chains per input; a comma-separated list produces one report each.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub b: Vec<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8)]
    pub b: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PredictArgs {
    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            b: self.b,
            ..self.sampling.config()
        }
    }
}

/// Inference settings used for evaluation during and after training.
#[derive(Args, Debug, Clone)]
pub struct TrainEvalArgs {
    #[arg(id = "eval_b", long = "eval-b", default_value_t = 8)]
    pub b: usize,
    #[arg(id = "eval_steps", long = "eval-steps", default_value_t = 100)]
    pub steps: usize,
    #[arg(id = "eval_seed", long = "eval-seed", default_value_t = 0)]
    pub seed: u64,
}

impl TrainEvalArgs {
    pub fn config(&self) -> InferenceConfig {
        InferenceConfig {
            b: self.b,
            steps: self.steps,
            seed: self.seed,
            eta: 1.0,
        }
    }
}

/// Optional overrides, one per training-config field. Unset flags keep the
/// value from the config file (or the built-in default).
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub f2: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `max` or `min`.
    #[arg(long)]
    pub snr_clip_mode: Option<String>,
    #[arg(long)]
    pub naive_ce_ablation: Option<bool>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_col: Option<f64>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub batch_n: Option<usize>,
    /// Diffusion steps `T`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub schedule_offset: Option<f64>,
    #[arg(long)]
    pub eps_floor: Option<f64>,
    #[arg(long)]
    pub teacher_steps: Option<usize>,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// Two comma-separated bounds, e.g. `0.1,0.3`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub sigma2_range: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub time_dim: Option<usize>,
    /// `gelu` or `tanh`.
    #[arg(long)]
    pub activation: Option<String>,
    /// `embedding-head` or `detached`.
    #[arg(long)]
    pub target_routing: Option<String>,
    /// `clean` or `augmented`.
    #[arg(long)]
    pub teacher_input: Option<String>,
}

fn named<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| format!("unrecognised value {value:?} for --{flag}"))
}

impl Overrides {
    pub fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig, String> {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            k => k, d => d, f2 => f2, lambda => loss.lambda, gamma => loss.gamma,
            naive_ce_ablation => loss.naive_ce_ablation, tau => tau, tau_col => tau_col,
            views => views, batch_n => batch_n, steps => steps, schedule_offset => schedule_offset,
            eps_floor => eps_floor, teacher_steps => teacher_steps, drop_prob => drop_prob,
            epochs => epochs, learning_rate => adam.learning_rate, beta1 => adam.beta1,
            beta2 => adam.beta2, epsilon => adam.epsilon, seed => seed, hidden_width => hidden_width,
            hidden_layers => hidden_layers, time_dim => time_dim,
        );
        if let Some(r) = &self.sigma2_range {
            c.sigma2_range = [r[0], r[1]];
        }
        if let Some(v) = &self.snr_clip_mode {
            c.loss.snr_clip_mode = named("snr-clip-mode", v)?;
        }
        if let Some(v) = &self.activation {
            c.activation = named("activation", v)?;
        }
        if let Some(v) = &self.target_routing {
            c.target_routing = named("target-routing", v)?;
        }
        if let Some(v) = &self.teacher_input {
            c.teacher_input = named("teacher-input", v)?;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub eval: TrainEvalArgs,
    /// Evaluate every N epochs when labels are available (0 disables).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Checkpoint path.
    #[arg(long, default_value = "model.cldm")]
    pub out: PathBuf,
    /// History CSV path; defaults to `<out stem>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ScanParam {
    Lambda,
    F2,
    D,
}

impl ScanParam {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanParam::Lambda => "lambda",
            ScanParam::F2 => "f2",
            ScanParam::D => "d",
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub param: ScanParam,
    /// Comma-separated values to scan.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Scan CSV path; stdout when absent.
    #[arg(id = "scan_out", long = "scan-out")]
    pub out: Option<PathBuf>,
}
