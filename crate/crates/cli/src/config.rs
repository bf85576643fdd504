//! Run configuration: a strict JSON schema mirroring the training options,
//! with command-line flags layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dccmvc::data::{DataFormat, Normalization};
use dccmvc::losses::LossWeights;
use dccmvc::trainer::TrainConfig;

/// Cluster-assignment procedure used when evaluating a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    /// k-means on the concatenated private means + fused shared
    /// probabilities.
    Kmeans,
    /// Argmax of the fused shared probabilities (the shared code is a relaxed
    /// cluster indicator).
    ArgmaxShared,
}

/// Everything a training run needs. Unknown JSON keys are rejected so a
/// misspelled hyperparameter fails loudly instead of silently taking its
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset path: a `dccb` file or a directory of `view{i}.csv` files.
    pub data: PathBuf,
    /// On-disk layout; inferred from the path when omitted.
    pub format: Option<DataFormat>,
    /// Directory receiving checkpoint, trace, metrics, and embedding files.
    pub output: PathBuf,
    pub normalize: Normalization,
    /// Cluster count; defaults to the number of label classes.
    pub k: Option<usize>,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub d_p: usize,
    pub tau: f64,
    pub hidden: Vec<usize>,
    pub sigmoid_output: bool,
    pub allow_partial_batch: bool,
    pub assign: AssignMode,
    /// Also write `embedding.tsv` after training.
    pub dump_embedding: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(2);
        Self {
            data: PathBuf::new(),
            format: None,
            output: PathBuf::from("out"),
            normalize: Normalization::MinMax,
            k: None,
            pretrain_epochs: train.pretrain_epochs,
            train_epochs: train.train_epochs,
            finetune_epochs: train.finetune_epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            seed: train.seed,
            weights: train.weights,
            d_p: train.d_p,
            tau: train.tau,
            hidden: train.hidden,
            sigmoid_output: train.sigmoid_output,
            allow_partial_batch: train.allow_partial_batch,
            assign: AssignMode::Kmeans,
            dump_embedding: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {}", path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {}", path.display(), e))
    }

    /// The training-side subset, with the cluster count resolved.
    pub fn train_config(&self, k: usize) -> TrainConfig {
        TrainConfig {
            pretrain_epochs: self.pretrain_epochs,
            train_epochs: self.train_epochs,
            finetune_epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            weights: self.weights,
            k,
            d_p: self.d_p,
            tau: self.tau,
            hidden: self.hidden.clone(),
            sigmoid_output: self.sigmoid_output,
            allow_partial_batch: self.allow_partial_batch,
        }
    }
}

/// `--format` fallback: `.dccb` files are binary, everything else is treated
/// as a CSV directory.
pub fn infer_format(path: &Path, explicit: Option<DataFormat>) -> DataFormat {
    explicit.unwrap_or_else(|| {
        if path.extension().is_some_and(|e| e == "dccb") {
            DataFormat::Dccb
        } else {
            DataFormat::Csv
        }
    })
}
