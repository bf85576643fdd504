//! Three-stage optimization: reconstruction pretraining, dual-consistency
//! training, and fine-tuning, with mini-batching, deterministic seeding, and
//! a per-epoch loss trace.
//!
//! Every random decision derives from `(config.seed, purpose, counters)`:
//! model initialization from the seed itself, the shuffle order of epoch `e`
//! from `(seed, e)`, and the noise of batch `b` in epoch `e` from
//! `(seed, e, b)`. Re-running with the same config and dataset on one thread
//! reproduces the trace bit for bit.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossReport, LossWeights, NoiseBundle};
use crate::model::{
    DccmvcModel, ModelConfig, DEFAULT_HIDDEN, DEFAULT_PRIVATE_DIM, DEFAULT_TAU,
};
use crate::numerics::{AdamState, Tape};
use crate::stream::{keyed_rng, DOMAIN_NOISE, DOMAIN_SHUFFLE};

/// Everything [`run`] needs besides the dataset. Construct with
/// [`TrainConfig::new`] (which fills in the published defaults) and override
/// fields as needed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Stage-1 epochs optimizing the reconstruction term alone.
    pub pretrain_epochs: usize,
    /// Stage-2 epochs optimizing the full objective.
    pub train_epochs: usize,
    /// Stage-3 epochs continuing the full objective at the same rate.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Cluster count (width of the shared code).
    pub k: usize,
    /// Width of each view's private code.
    pub d_p: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Encoder trunk widths; decoders mirror them.
    pub hidden: Vec<usize>,
    /// Sigmoid on the decoder output (use with data normalized to `[0,1]`).
    pub sigmoid_output: bool,
    /// Keep a short final batch instead of dropping it.
    pub allow_partial_batch: bool,
}

impl TrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            pretrain_epochs: 100,
            train_epochs: 100,
            finetune_epochs: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            k,
            d_p: DEFAULT_PRIVATE_DIM,
            tau: DEFAULT_TAU,
            hidden: DEFAULT_HIDDEN.to_vec(),
            sigmoid_output: true,
            allow_partial_batch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument {
                op: "TrainConfig::validate",
                expected: "batch_size >= 1".into(),
                actual: "0".into(),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "TrainConfig::validate",
                expected: "non-negative finite learning rate".into(),
                actual: self.learning_rate.to_string(),
            });
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument {
                op: "TrainConfig::validate",
                expected: "k >= 2".into(),
                actual: self.k.to_string(),
            });
        }
        self.weights.validate()?;
        self.model_config(&[1]).validate()
    }

    fn model_config(&self, view_dims: &[usize]) -> ModelConfig {
        ModelConfig {
            view_dims: view_dims.to_vec(),
            k: self.k,
            d_p: self.d_p,
            tau: self.tau,
            hidden: self.hidden.clone(),
            sigmoid_output: self.sigmoid_output,
        }
    }
}

/// The three phases of the optimization schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
        }
    }

    /// Stage-1 zeroes the consistency and contrastive weights; the later
    /// stages use the configured weights unchanged.
    pub fn effective_weights(self, weights: &LossWeights) -> LossWeights {
        match self {
            Stage::Pretrain => LossWeights {
                beta: 0.0,
                gamma: 0.0,
                ..weights.clone()
            },
            Stage::Train | Stage::Finetune => weights.clone(),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One completed epoch: its position in the global schedule, the stage it
/// belongs to, the batch-size-weighted mean of each loss term, and how long
/// it took. Wall-clock time stays out of the serialized trace so identical
/// runs produce identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Global 0-based epoch index across all stages.
    pub epoch: usize,
    pub stage: Stage,
    pub report: LossReport,
    pub seconds: f64,
}

/// Per-epoch loss history across all stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    /// Path of the saved checkpoint, when the caller wrote one.
    pub checkpoint: Option<String>,
}

impl TrainTrace {
    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn final_report(&self) -> Option<&LossReport> {
        self.records.last().map(|r| &r.report)
    }

    /// Writes the trace as tab-separated lines, one per epoch, preceded by a
    /// `#` header. Timing is deliberately omitted: the written trace is a
    /// pure function of (config, dataset, seed).
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "# epoch\tstage\trec\twithin\tcross\tshared_inference\tcontrastive\ttotal"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.stage,
                r.report.rec,
                r.report.within,
                r.report.cross,
                r.report.shared_inference,
                r.report.contrastive,
                r.report.total
            )?;
        }
        Ok(())
    }
}

/// Trains a fresh model on the dataset through all three stages and returns
/// it with the trace. Deterministic given `(config, dataset)`; aborts with
/// the offending stage, epoch, batch, and term if any loss goes non-finite.
pub fn run(dataset: &MultiViewDataset, config: &TrainConfig) -> Result<(DccmvcModel, TrainTrace)> {
    config.validate()?;
    if dataset.n() < config.batch_size && !config.allow_partial_batch {
        return Err(Error::InvalidArgument {
            op: "trainer::run",
            expected: format!(
                "batch_size <= {} samples (or allow_partial_batch)",
                dataset.n()
            ),
            actual: config.batch_size.to_string(),
        });
    }
    let model_config = config.model_config(&dataset.view_dims());
    let mut model = DccmvcModel::init(&model_config, config.seed)?;
    let mut optimizer = AdamState::new(model.parameters(), config.learning_rate)?;
    let mut trace = TrainTrace::default();

    let schedule = [
        (Stage::Pretrain, config.pretrain_epochs),
        (Stage::Train, config.train_epochs),
        (Stage::Finetune, config.finetune_epochs),
    ];
    let mut global_epoch = 0usize;
    for (stage, epochs) in schedule {
        for _ in 0..epochs {
            let started = Instant::now();
            let report = epoch(dataset, &mut model, &mut optimizer, stage, global_epoch, config)?;
            trace.records.push(EpochRecord {
                epoch: global_epoch,
                stage,
                report,
                seconds: started.elapsed().as_secs_f64(),
            });
            global_epoch += 1;
        }
    }
    Ok((model, trace))
}

/// One full pass over the dataset in shuffled mini-batches. The shuffle is
/// keyed by `(seed, epoch_index)` and each batch's noise by
/// `(seed, epoch_index, batch_index)`. Returns the batch-size-weighted mean
/// loss report. When `allow_partial_batch` is off, a short final batch is
/// dropped.
pub fn epoch(
    dataset: &MultiViewDataset,
    model: &mut DccmvcModel,
    optimizer: &mut AdamState,
    stage: Stage,
    epoch_index: usize,
    config: &TrainConfig,
) -> Result<LossReport> {
    let n = dataset.n();
    let weights = stage.effective_weights(&config.weights);
    let names = model.param_names();

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = keyed_rng(config.seed, DOMAIN_SHUFFLE, epoch_index as u64, 0);
    order.shuffle(&mut shuffle_rng);

    let mut sums = LossReport::default();
    let mut seen = 0usize;
    let mut batch_index = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + config.batch_size).min(n);
        if end - start < config.batch_size && !config.allow_partial_batch {
            break;
        }
        let rows = &order[start..end];
        let report = train_batch(dataset, model, optimizer, &names, rows, &weights, config, epoch_index, batch_index)
            .map_err(|e| match e {
                Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                    stage: stage.name().into(),
                    epoch: epoch_index,
                    batch: batch_index,
                    term,
                },
                other => other,
            })?;
        let b = (end - start) as f64;
        sums.rec += b * report.rec;
        sums.within += b * report.within;
        sums.cross += b * report.cross;
        sums.shared_inference += b * report.shared_inference;
        sums.contrastive += b * report.contrastive;
        sums.total += b * report.total;
        seen += end - start;
        batch_index += 1;
        start = end;
    }
    if seen > 0 {
        let count = seen as f64;
        sums.rec /= count;
        sums.within /= count;
        sums.cross /= count;
        sums.shared_inference /= count;
        sums.contrastive /= count;
        sums.total /= count;
    }
    Ok(sums)
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    dataset: &MultiViewDataset,
    model: &mut DccmvcModel,
    optimizer: &mut AdamState,
    names: &[String],
    rows: &[usize],
    weights: &LossWeights,
    config: &TrainConfig,
    epoch_index: usize,
    batch_index: usize,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let x: Vec<_> = dataset
        .views()
        .iter()
        .map(|view| Ok(tape.constant(view.gather_rows(rows)?)))
        .collect::<Result<_>>()?;
    let mut noise_rng = keyed_rng(
        config.seed,
        DOMAIN_NOISE,
        epoch_index as u64,
        batch_index as u64,
    );
    let noise = NoiseBundle::draw(
        &mut noise_rng,
        rows.len(),
        model.num_views(),
        model.d_p,
        model.k,
    );
    let (total, report) = loss_total(&mut tape, &binding, &x, &noise, weights)?;
    if let Some(term) = report.first_non_finite() {
        // Caller fills in stage/epoch/batch context.
        return Err(Error::NonFiniteLoss {
            stage: String::new(),
            epoch: 0,
            batch: 0,
            term: term.into(),
        });
    }
    tape.backward(total)?;
    let grads: Vec<Option<&[f64]>> = binding
        .param_ids()
        .iter()
        .map(|&id| tape.grad(id))
        .collect();
    let mut params = model.parameters_mut();
    optimizer.step(&mut params, &grads, names)?;
    Ok(report)
}
