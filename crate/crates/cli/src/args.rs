use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tfmoe::config::{DataSource, ExperimentConfig, Protocol};

#[derive(Parser, Debug)]
#[command(name = "tfmoe", version, about = "Continual traffic forecasting on expanding sensor networks")]
pub struct Cli {
    /// TOML or JSON experiment configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Dataset directory (flows.csv, tasks.csv, calendar.csv). Defaults to `$TFMOE_DATA_DIR`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    /// More log output; repeat for debug records.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic stream as dataset files plus cluster labels.
    Generate(GenerateArgs),
    /// Pre-train clustering and reconstructors on the first task.
    Pretrain(RunArgs),
    /// Train one task, or every remaining task.
    Train(TrainArgs),
    /// Test-split metrics of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Aggregate metrics files into tables and plot data.
    Report(ReportArgs),
    /// Finite-difference check of every differentiable kernel.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub initial_nodes: Option<usize>,
    #[arg(long)]
    pub nodes_per_task: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub steps_per_day: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Run directory for checkpoints, logs and metrics.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Task to train (1-based); earlier tasks must have checkpoints.
    #[arg(long, conflicts_with = "all_tasks", required_unless_present = "all_tasks")]
    pub task: Option<usize>,
    /// Train every task not yet trained in the run directory.
    #[arg(long)]
    pub all_tasks: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate; defaults to the latest one in the run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Task to evaluate; defaults to every task up to the checkpoint's last.
    #[arg(long)]
    pub task: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics files or directories searched for them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Flags mirroring the experiment configuration.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_experts: Option<usize>,
    #[arg(long)]
    pub pretrain_latent: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// Sets both input and output window length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub no_consolidation: bool,
    #[arg(long)]
    pub no_sampling: bool,
    #[arg(long)]
    pub no_replay: bool,
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    #[arg(long)]
    pub replay_fraction: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub dec_epochs: Option<usize>,
    #[arg(long)]
    pub reconstructor_epochs: Option<usize>,
    #[arg(long)]
    pub epochs_first: Option<usize>,
    #[arg(long)]
    pub epochs_later: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_reconstructor: Option<f64>,
    #[arg(long)]
    pub lr_predictor: Option<f64>,
    /// Comma-separated horizon steps, e.g. `3,6,12`.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long)]
    pub mape_epsilon: Option<f64>,
    /// Minutes per bin of CSV data.
    #[arg(long, default_value_t = 5)]
    pub bin_minutes: usize,
    /// Use the synthetic stream of the configuration even when a data directory is set.
    #[arg(long)]
    pub synthetic: bool,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    Protocol::parse(s).ok_or_else(|| format!("unknown protocol `{s}` (tfmoe, static, expansible, retrained)"))
}

macro_rules! set {
    ($cfg:expr, $($field:ident <- $value:expr),+ $(,)?) => {
        $(if let Some(v) = $value { $cfg.$field = v; })+
    };
}

impl Overrides {
    /// Applies the flags. `file_sets_data` says whether the file chose a data source.
    pub fn apply(&self, cfg: &mut ExperimentConfig, data_dir: Option<&PathBuf>, data_flag: bool, file_sets_data: bool) {
        set!(cfg,
            protocol <- self.protocol,
            seed <- self.seed,
            num_experts <- self.num_experts,
            pretrain_latent <- self.pretrain_latent,
            latent <- self.latent,
            embed <- self.embed,
            diffusion_steps <- self.diffusion_steps,
            input_steps <- self.window,
            output_steps <- self.window,
            alpha <- self.alpha,
            beta <- self.beta,
            sample_fraction <- self.sample_fraction,
            replay_fraction <- self.replay_fraction,
            pretrain_epochs <- self.pretrain_epochs,
            dec_epochs <- self.dec_epochs,
            reconstructor_epochs <- self.reconstructor_epochs,
            epochs_first <- self.epochs_first,
            epochs_later <- self.epochs_later,
            batch_size <- self.batch_size,
            horizons <- self.horizons.clone(),
            mape_epsilon <- self.mape_epsilon,
        );
        set!(cfg.lr,
            pretrain <- self.lr_pretrain,
            reconstructor <- self.lr_reconstructor,
            predictor <- self.lr_predictor,
        );
        cfg.consolidation &= !self.no_consolidation;
        cfg.sampling &= !self.no_sampling;
        cfg.replay &= !self.no_replay;
        if let (Some(dir), false) = (data_dir, self.synthetic) {
            // an explicit flag beats the file; the environment only fills a gap
            if data_flag || !file_sets_data {
                cfg.data = DataSource::Csv { path: dir.clone(), bin_minutes: self.bin_minutes };
            }
        }
        if let (Some(seed), DataSource::Synthetic(spec)) = (self.seed, &mut cfg.data) {
            spec.seed = seed;
        }
    }
}
