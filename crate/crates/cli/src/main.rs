//! Command-line front end: generate synthetic data, train, evaluate, and
//! dump representations.
//!
//! Exit codes: 0 on success, 2 for usage/config/data errors, 3 for numerical
//! failures (non-finite loss or gradient).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dccmvc::data::{DataFormat, Mixing, Normalization, SynthSpec};

use commands::{CliError, CmdResult, EmbedArgs, EvalArgs};
use config::{AssignMode, RunConfig};

#[derive(Parser)]
#[command(
    name = "dccmvc",
    version,
    about = "Disentangled dual-consistency multi-view clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with planted clusters.
    Synth(SynthCmd),
    /// Train a model and write checkpoint, loss trace, and metrics.
    Train(TrainCmd),
    /// Score a checkpoint against a labeled dataset (JSON on stdout).
    Eval(EvalCmd),
    /// Dump per-sample representations as TSV.
    Embed(EmbedCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatFlag {
    Csv,
    Dccb,
}

impl From<FormatFlag> for DataFormat {
    fn from(f: FormatFlag) -> Self {
        match f {
            FormatFlag::Csv => DataFormat::Csv,
            FormatFlag::Dccb => DataFormat::Dccb,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeFlag {
    Minmax,
    Zscore,
    None,
}

impl From<NormalizeFlag> for Normalization {
    fn from(f: NormalizeFlag) -> Self {
        match f {
            NormalizeFlag::Minmax => Normalization::MinMax,
            NormalizeFlag::Zscore => Normalization::ZScore,
            NormalizeFlag::None => Normalization::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MixingFlag {
    Linear,
    Tanh,
}

impl From<MixingFlag> for Mixing {
    fn from(f: MixingFlag) -> Self {
        match f {
            MixingFlag::Linear => Mixing::Linear,
            MixingFlag::Tanh => Mixing::Tanh,
        }
    }
}

#[derive(clap::Args)]
struct SynthCmd {
    /// Sample count.
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Cluster count.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Number of views.
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Shared (cluster) factor dimension.
    #[arg(long, default_value_t = 3)]
    d_shared: usize,
    /// Per-view private factor dimension.
    #[arg(long, default_value_t = 4)]
    d_private: usize,
    /// Observed dimension of each view.
    #[arg(long, default_value_t = 20)]
    view_dim: usize,
    #[arg(long, value_enum, default_value = "tanh")]
    mixing: MixingFlag,
    /// Shared-jitter and observation-noise scale.
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct TrainCmd {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset path (`.dccb` file or CSV directory).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatFlag>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    normalize: Option<NormalizeFlag>,
    /// Cluster count; defaults to the number of label classes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reconstruction weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Consistency-block weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Contrastive weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Private-code width.
    #[arg(long)]
    d_p: Option<usize>,
    /// Gumbel-Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Encoder trunk widths, comma separated (e.g. 500,500,500,2000).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    sigmoid_output: Option<bool>,
    #[arg(long)]
    allow_partial_batch: Option<bool>,
    #[arg(long, value_enum)]
    assign: Option<AssignMode>,
    /// Also write embedding.tsv.
    #[arg(long)]
    dump_embedding: bool,
}

impl TrainCmd {
    fn into_config(self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path).map_err(CliError::usage)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.data {
            config.data = v;
        }
        if let Some(v) = self.format {
            config.format = Some(v.into());
        }
        if let Some(v) = self.output {
            config.output = v;
        }
        if let Some(v) = self.normalize {
            config.normalize = v.into();
        }
        if self.k.is_some() {
            config.k = self.k;
        }
        if let Some(v) = self.pretrain_epochs {
            config.pretrain_epochs = v;
        }
        if let Some(v) = self.train_epochs {
            config.train_epochs = v;
        }
        if let Some(v) = self.finetune_epochs {
            config.finetune_epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.alpha {
            config.weights.alpha = v;
        }
        if let Some(v) = self.beta {
            config.weights.beta = v;
        }
        if let Some(v) = self.gamma {
            config.weights.gamma = v;
        }
        if let Some(v) = self.d_p {
            config.d_p = v;
        }
        if let Some(v) = self.tau {
            config.tau = v;
        }
        if let Some(v) = self.hidden {
            config.hidden = v;
        }
        if let Some(v) = self.sigmoid_output {
            config.sigmoid_output = v;
        }
        if let Some(v) = self.allow_partial_batch {
            config.allow_partial_batch = v;
        }
        if let Some(v) = self.assign {
            config.assign = v;
        }
        if self.dump_embedding {
            config.dump_embedding = true;
        }
        Ok(config)
    }
}

#[derive(clap::Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatFlag>,
    /// Must match the normalization used in training.
    #[arg(long, value_enum, default_value = "minmax")]
    normalize: NormalizeFlag,
    #[arg(long, value_enum, default_value = "kmeans")]
    assign: AssignMode,
    /// Seed for the k-means restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct EmbedCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatFlag>,
    /// Must match the normalization used in training.
    #[arg(long, value_enum, default_value = "minmax")]
    normalize: NormalizeFlag,
    /// Output file; defaults to stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth(cmd) => {
            let spec = SynthSpec {
                n: cmd.n,
                k: cmd.k,
                views: cmd.views,
                d_shared: cmd.d_shared,
                d_private: cmd.d_private,
                view_dim: cmd.view_dim,
                mixing: cmd.mixing.into(),
                noise_sigma: cmd.noise_sigma,
                seed: cmd.seed,
            };
            commands::cmd_synth(&spec, &cmd.output)
        }
        Command::Train(cmd) => commands::cmd_train(&cmd.into_config()?),
        Command::Eval(cmd) => commands::cmd_eval(&EvalArgs {
            checkpoint: cmd.checkpoint,
            data: cmd.data,
            format: cmd.format.map(Into::into),
            normalize: cmd.normalize.into(),
            assign: cmd.assign,
            seed: cmd.seed,
        }),
        Command::Embed(cmd) => commands::cmd_embed(&EmbedArgs {
            checkpoint: cmd.checkpoint,
            data: cmd.data,
            format: cmd.format.map(Into::into),
            normalize: cmd.normalize.into(),
            out: cmd.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
