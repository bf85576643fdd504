//! Implementations of the four subcommands. Each returns `Ok(())` on
//! success; errors carry the process exit code (2 for usage/config/data
//! problems, 3 for numerical failures).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use dccmvc::data::{
    self, synth_generate, MultiViewDataset, Normalization, SynthSpec,
};
use dccmvc::metrics::{
    accuracy, extract_representation, kmeans, nmi, purity, MetricReport, Partition,
    DEFAULT_KMEANS_MAX_ITER, DEFAULT_KMEANS_RESTARTS,
};
use dccmvc::model::DccmvcModel;
use dccmvc::trainer;
use dccmvc::Error;

use crate::config::{infer_format, AssignMode, RunConfig};

/// Error plus the exit code the process should report.
pub struct CliError {
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 3,
            _ => 2,
        };
        Self {
            message: e.to_string(),
            code,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            message: e.to_string(),
            code: 2,
        }
    }
}

pub type CmdResult = Result<(), CliError>;

#[derive(Serialize)]
struct SynthManifest<'a> {
    spec: &'a SynthSpec,
    dccb: &'a str,
    csv: Vec<String>,
}

/// Generates a synthetic dataset and writes it in both formats plus a
/// manifest recording the generating spec.
pub fn cmd_synth(spec: &SynthSpec, output: &Path) -> CmdResult {
    let dataset = synth_generate(spec)?;
    fs::create_dir_all(output)?;
    let dccb_name = "data.dccb";
    data::save_dccb(&dataset, &output.join(dccb_name))?;
    data::save_csv_dir(&dataset, output)?;
    let mut csv: Vec<String> = (0..dataset.num_views())
        .map(|v| format!("view{}.csv", v))
        .collect();
    csv.push("labels.csv".into());
    let manifest = SynthManifest {
        spec,
        dccb: dccb_name,
        csv,
    };
    write_json(&output.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} samples, {} views to {}",
        dataset.n(),
        dataset.num_views(),
        output.display()
    );
    Ok(())
}

fn load_dataset(path: &Path, format: Option<data::DataFormat>) -> Result<MultiViewDataset, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "dataset path {} does not exist",
            path.display()
        )));
    }
    Ok(data::load(path, infer_format(path, format))?)
}

/// Trains per the config and writes `checkpoint.dccm`, `trace.log`, and —
/// when the dataset is labeled — `metrics.json` into the output directory.
pub fn cmd_train(config: &RunConfig) -> CmdResult {
    if config.data.as_os_str().is_empty() {
        return Err(CliError::usage("no dataset path: set `data` in the config or pass --data"));
    }
    let raw = load_dataset(&config.data, config.format)?;
    let dataset = config.normalize.apply(&raw);
    let k = match (config.k, dataset.k()) {
        (Some(k), _) => k,
        (None, Some(k)) => k,
        (None, None) => {
            return Err(CliError::usage(
                "cluster count unknown: dataset has no labels, set `k`",
            ));
        }
    };
    let train_config = config.train_config(k);
    let (model, mut trace) = trainer::run(&dataset, &train_config)?;

    fs::create_dir_all(&config.output)?;
    let checkpoint_path = config.output.join("checkpoint.dccm");
    model.save(&checkpoint_path)?;
    trace.checkpoint = Some(checkpoint_path.display().to_string());

    let trace_path = config.output.join("trace.log");
    let mut w = BufWriter::new(File::create(&trace_path)?);
    trace.write(&mut w)?;
    w.flush()?;

    println!("wrote {}", checkpoint_path.display());
    println!("wrote {}", trace_path.display());

    if dataset.labels().is_some() {
        let report = evaluate(&model, &dataset, config.assign, config.seed)?;
        let metrics_path = config.output.join("metrics.json");
        write_json(&metrics_path, &report)?;
        println!("wrote {}", metrics_path.display());
        println!(
            "acc {:.4}  nmi {:.4}  pur {:.4}",
            report.acc, report.nmi, report.pur
        );
    }

    if config.dump_embedding {
        let embedding_path = config.output.join("embedding.tsv");
        let mut w = BufWriter::new(File::create(&embedding_path)?);
        write_embedding(&model, &dataset, &mut w)?;
        w.flush()?;
        println!("wrote {}", embedding_path.display());
    }
    Ok(())
}

/// Cluster assignments for a trained model under the chosen mode.
pub fn assign_clusters(
    model: &DccmvcModel,
    dataset: &MultiViewDataset,
    mode: AssignMode,
    seed: u64,
) -> Result<Partition, CliError> {
    let rep = extract_representation(model, dataset, true, seed)?;
    match mode {
        AssignMode::Kmeans => Ok(kmeans(
            &rep,
            model.k,
            seed,
            DEFAULT_KMEANS_MAX_ITER,
            DEFAULT_KMEANS_RESTARTS,
        )?),
        AssignMode::ArgmaxShared => {
            // The fused shared probabilities are the last K columns.
            let offset = rep.cols() - model.k;
            let labels = (0..rep.rows())
                .map(|i| {
                    let row = &rep.row(i)[offset..];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                        .map(|(j, _)| j)
                        .expect("k >= 1")
                })
                .collect();
            Ok(Partition::new(labels, model.k)?)
        }
    }
}

fn evaluate(
    model: &DccmvcModel,
    dataset: &MultiViewDataset,
    mode: AssignMode,
    seed: u64,
) -> Result<MetricReport, CliError> {
    let labels = dataset
        .labels()
        .ok_or_else(|| CliError::usage("evaluation needs ground-truth labels"))?;
    let pred = assign_clusters(model, dataset, mode, seed)?;
    let truth = Partition::from_labels(labels.to_vec())?;
    Ok(MetricReport {
        acc: accuracy(&pred, &truth)?,
        nmi: nmi(&pred, &truth)?,
        pur: purity(&pred, &truth)?,
        k: pred.k(),
        n: pred.len(),
        seed,
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub format: Option<data::DataFormat>,
    pub normalize: Normalization,
    pub assign: AssignMode,
    pub seed: u64,
}

/// Evaluates a checkpoint against a labeled dataset and prints the metric
/// report as JSON on stdout.
pub fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let model = DccmvcModel::load(&args.checkpoint)?;
    let raw = load_dataset(&args.data, args.format)?;
    let dataset = args.normalize.apply(&raw);
    check_compatible(&model, &dataset)?;
    let report = evaluate(&model, &dataset, args.assign, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
    Ok(())
}

pub struct EmbedArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub format: Option<data::DataFormat>,
    pub normalize: Normalization,
    pub out: Option<PathBuf>,
}

/// Writes the representation as TSV rows `index, label, coordinates...`;
/// unlabeled samples get label −1.
pub fn cmd_embed(args: &EmbedArgs) -> CmdResult {
    let model = DccmvcModel::load(&args.checkpoint)?;
    let raw = load_dataset(&args.data, args.format)?;
    let dataset = args.normalize.apply(&raw);
    check_compatible(&model, &dataset)?;
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            write_embedding(&model, &dataset, &mut w)?;
            w.flush()?;
            println!("wrote {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write_embedding(&model, &dataset, &mut w)?;
        }
    }
    Ok(())
}

fn check_compatible(model: &DccmvcModel, dataset: &MultiViewDataset) -> CmdResult {
    model.check_compatible(&dataset.view_dims())?;
    if let Some(k) = dataset.k() {
        if k != model.k {
            return Err(CliError::from(Error::CheckpointMismatch {
                dimension: "cluster count".into(),
                in_checkpoint: model.k,
                in_dataset: k,
            }));
        }
    }
    Ok(())
}

fn write_embedding(
    model: &DccmvcModel,
    dataset: &MultiViewDataset,
    w: &mut impl Write,
) -> CmdResult {
    let rep = extract_representation(model, dataset, true, 0)?;
    let labels = dataset.labels();
    for i in 0..rep.rows() {
        let label = labels.map_or(-1i64, |l| l[i] as i64);
        write!(w, "{}\t{}", i, label)?;
        for x in rep.row(i) {
            write!(w, "\t{}", x)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut file = File::create(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}
