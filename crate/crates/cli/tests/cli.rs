//! End-to-end tests of the `dccmvc` binary: every subcommand, the exit-code
//! contract, and the determinism of written artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dccmvc::data::{load_dccb, save_dccb, DataFormat, SynthSpec};
use dccmvc::metrics::extract_representation;
use dccmvc::model::{DccmvcModel, ModelConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccmvc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Generates a small dataset and returns its dccb path.
fn make_dataset(dir: &Path, seed: u64) -> String {
    let data_dir = dir.join("data");
    let out = run(&[
        "synth",
        "--n",
        "90",
        "--k",
        "3",
        "--views",
        "2",
        "--d-shared",
        "2",
        "--d-private",
        "2",
        "--view-dim",
        "6",
        "--seed",
        &seed.to_string(),
        "--output",
        data_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    data_dir.join("data.dccb").to_str().unwrap().to_string()
}

/// Trains a quick model and returns the run directory.
fn quick_train(dir: &Path, data: &str, extra: &[&str]) -> std::path::PathBuf {
    let run_dir = dir.join("run");
    let mut args = vec![
        "train",
        "--data",
        data,
        "--output",
        run_dir.to_str().unwrap(),
        "--pretrain-epochs",
        "4",
        "--train-epochs",
        "4",
        "--finetune-epochs",
        "2",
        "--batch-size",
        "32",
        "--hidden",
        "8",
        "--d-p",
        "2",
        "--learning-rate",
        "1e-3",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_success(&out);
    run_dir
}

#[test]
fn synth_manifest_round_trips_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--n",
        "600",
        "--k",
        "3",
        "--views",
        "2",
        "--seed",
        "7",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    let spec: SynthSpec = serde_json::from_value(manifest["spec"].clone()).unwrap();
    assert_eq!(spec.n, 600);
    assert_eq!(spec.k, 3);
    assert_eq!(spec.views, 2);
    assert_eq!(spec.seed, 7);
    for name in ["data.dccb", "view0.csv", "view1.csv", "labels.csv"] {
        assert!(dir.path().join(name).exists(), "{} missing", name);
    }
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_dataset(&dir.path().join("a"), 5);
    let b = make_dataset(&dir.path().join("b"), 5);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn synth_labels_are_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--n",
        "3000",
        "--k",
        "5",
        "--view-dim",
        "4",
        "--seed",
        "11",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    let mut counts = [0usize; 5];
    for line in labels.lines() {
        counts[line.parse::<usize>().unwrap()] += 1;
    }
    // Binomial(3000, 1/5): sigma = sqrt(3000 * 0.2 * 0.8) ~ 21.9.
    let sigma = (3000.0f64 * 0.2 * 0.8).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - 600.0).abs();
        assert!(dev <= 3.0 * sigma, "class {}: count {} off by {}", k, c, dev);
    }
}

#[test]
fn train_rejects_missing_dataset_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        dir.path().join("nope.dccb").to_str().unwrap(),
        "--output",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_rejects_unknown_config_key_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    fs::write(&config_path, r#"{"data": "x.dccb", "learning_rte": 0.1}"#).unwrap();
    let out = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rte"), "stderr: {}", stderr);
}

#[test]
fn train_zero_epochs_writes_initialization_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 3);
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        &data,
        "--output",
        run_dir.to_str().unwrap(),
        "--pretrain-epochs",
        "0",
        "--train-epochs",
        "0",
        "--finetune-epochs",
        "0",
        "--hidden",
        "8",
        "--d-p",
        "2",
        "--seed",
        "21",
    ]);
    assert_success(&out);
    let saved = DccmvcModel::load(&run_dir.join("checkpoint.dccm")).unwrap();
    let reference = DccmvcModel::init(
        &ModelConfig {
            view_dims: vec![6, 6],
            k: 3,
            d_p: 2,
            tau: 0.5,
            hidden: vec![8],
            sigmoid_output: true,
        },
        21,
    )
    .unwrap();
    let bits = |m: &DccmvcModel| -> Vec<u64> {
        m.parameters()
            .iter()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(bits(&saved), bits(&reference));
}

#[test]
fn train_artifacts_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 4);
    let run_a = quick_train(&dir.path().join("a"), &data, &["--seed", "5"]);
    let run_b = quick_train(&dir.path().join("b"), &data, &["--seed", "5"]);
    for name in ["checkpoint.dccm", "trace.log", "metrics.json"] {
        let a = fs::read(run_a.join(name)).unwrap();
        let b = fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", name);
    }
}

#[test]
fn eval_reproduces_training_metrics_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 6);
    let run_dir = quick_train(dir.path(), &data, &[]);
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.dccm").to_str().unwrap(),
        "--data",
        &data,
    ]);
    assert_success(&out);
    let from_eval: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("JSON on stdout");
    let from_train: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(from_eval, from_train);
}

#[test]
fn eval_supports_both_assignment_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 8);
    let run_dir = quick_train(dir.path(), &data, &[]);
    for mode in ["kmeans", "argmax-shared"] {
        let out = run(&[
            "eval",
            "--checkpoint",
            run_dir.join("checkpoint.dccm").to_str().unwrap(),
            "--data",
            &data,
            "--assign",
            mode,
        ]);
        assert_success(&out);
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        for key in ["acc", "nmi", "pur"] {
            let v = report[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{} = {} in mode {}", key, v, mode);
        }
        assert_eq!(report["k"].as_u64(), Some(3));
        assert_eq!(report["n"].as_u64(), Some(90));
    }
}

#[test]
fn eval_metrics_are_invariant_to_sample_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 9);
    let run_dir = quick_train(dir.path(), &data, &[]);

    let ds = load_dccb(Path::new(&data)).unwrap();
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.reverse();
    order.swap(3, 47);
    let shuffled = ds.gather(&order).unwrap();
    let shuffled_path = dir.path().join("shuffled.dccb");
    save_dccb(&shuffled, &shuffled_path).unwrap();

    for mode in ["kmeans", "argmax-shared"] {
        let original = run(&[
            "eval",
            "--checkpoint",
            run_dir.join("checkpoint.dccm").to_str().unwrap(),
            "--data",
            &data,
            "--assign",
            mode,
        ]);
        let permuted = run(&[
            "eval",
            "--checkpoint",
            run_dir.join("checkpoint.dccm").to_str().unwrap(),
            "--data",
            shuffled_path.to_str().unwrap(),
            "--assign",
            mode,
        ]);
        assert_success(&original);
        assert_success(&permuted);
        let a: serde_json::Value = serde_json::from_slice(&original.stdout).unwrap();
        let b: serde_json::Value = serde_json::from_slice(&permuted.stdout).unwrap();
        for key in ["acc", "nmi", "pur"] {
            assert_eq!(a[key], b[key], "{} changed under permutation ({})", key, mode);
        }
    }
}

#[test]
fn eval_rejects_incompatible_checkpoint_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 10);
    let run_dir = quick_train(dir.path(), &data, &[]);

    // Same rows, one view truncated to 5 columns.
    let ds = load_dccb(Path::new(&data)).unwrap();
    let narrow = dccmvc::data::MultiViewDataset::new(
        "narrow",
        vec![
            ds.view(0).clone(),
            dccmvc::numerics::Tensor::new(
                vec![ds.n(), 5],
                (0..ds.n())
                    .flat_map(|i| ds.view(1).row(i)[..5].to_vec())
                    .collect(),
            )
            .unwrap(),
        ],
        ds.labels().map(<[usize]>::to_vec),
    )
    .unwrap();
    let narrow_path = dir.path().join("narrow.dccb");
    save_dccb(&narrow, &narrow_path).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.dccm").to_str().unwrap(),
        "--data",
        narrow_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("view 1"), "stderr: {}", stderr);
}

#[test]
fn embed_matches_library_representation_at_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 12);
    let run_dir = quick_train(dir.path(), &data, &[]);
    let tsv_path = dir.path().join("embedding.tsv");
    let out = run(&[
        "embed",
        "--checkpoint",
        run_dir.join("checkpoint.dccm").to_str().unwrap(),
        "--data",
        &data,
        "--out",
        tsv_path.to_str().unwrap(),
    ]);
    assert_success(&out);

    let model = DccmvcModel::load(&run_dir.join("checkpoint.dccm")).unwrap();
    let ds = dccmvc::data::normalize_minmax(&load_dccb(Path::new(&data)).unwrap());
    let rep = extract_representation(&model, &ds, true, 0).unwrap();

    let text = fs::read_to_string(&tsv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 90);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 2 + 2 * 2 + 3, "row width");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        assert_eq!(
            fields[1].parse::<i64>().unwrap(),
            ds.labels().unwrap()[i] as i64
        );
        for (j, f) in fields[2..].iter().enumerate() {
            let parsed: f64 = f.parse().unwrap();
            assert_eq!(parsed.to_bits(), rep.at(i, j).to_bits(), "row {} col {}", i, j);
        }
    }
}

#[test]
fn embed_uses_sentinel_label_for_unlabeled_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 13);
    let run_dir = quick_train(dir.path(), &data, &[]);

    let ds = load_dccb(Path::new(&data)).unwrap();
    let unlabeled =
        dccmvc::data::MultiViewDataset::new("unlabeled", ds.views().to_vec(), None).unwrap();
    let unlabeled_path = dir.path().join("unlabeled.dccb");
    save_dccb(&unlabeled, &unlabeled_path).unwrap();

    let out = run(&[
        "embed",
        "--checkpoint",
        run_dir.join("checkpoint.dccm").to_str().unwrap(),
        "--data",
        unlabeled_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 90);
    for line in lines {
        assert_eq!(line.split('\t').nth(1), Some("-1"));
    }
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // Astronomically large features with normalization off overflow the
    // squared error immediately.
    let huge = dccmvc::numerics::Tensor::full(vec![8, 3], 1e200);
    let ds = dccmvc::data::MultiViewDataset::new(
        "huge",
        vec![huge.clone(), huge],
        Some(vec![0, 1, 0, 1, 0, 1, 0, 1]),
    )
    .unwrap();
    let path = dir.path().join("huge.dccb");
    save_dccb(&ds, &path).unwrap();
    let out = run(&[
        "train",
        "--data",
        path.to_str().unwrap(),
        "--output",
        dir.path().join("run").to_str().unwrap(),
        "--normalize",
        "none",
        "--hidden",
        "4",
        "--d-p",
        "2",
    ]);
    assert_eq!(exit_code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epoch 0"), "stderr: {}", stderr);
    assert!(stderr.contains("batch 0"), "stderr: {}", stderr);
}

#[test]
fn format_flag_overrides_extension_inference() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), 14);
    // The synth output directory doubles as a CSV dataset directory.
    let csv_dir = dir.path().join("data");
    let out = run(&[
        "train",
        "--data",
        csv_dir.to_str().unwrap(),
        "--format",
        "csv",
        "--output",
        dir.path().join("run").to_str().unwrap(),
        "--pretrain-epochs",
        "1",
        "--train-epochs",
        "0",
        "--finetune-epochs",
        "0",
        "--hidden",
        "8",
        "--d-p",
        "2",
    ]);
    assert_success(&out);
    assert_eq!(
        load_dccb(&csv_dir.join("data.dccb")).unwrap().n(),
        90,
        "sanity: csv dir and dccb hold the same dataset"
    );
    let _ = DataFormat::Csv;
}

#[test]
fn run_config_json_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 15);
    let run_dir = dir.path().join("run");
    let config = serde_json::json!({
        "data": data,
        "output": run_dir.to_str().unwrap(),
        "pretrain_epochs": 2,
        "train_epochs": 1,
        "finetune_epochs": 0,
        "batch_size": 32,
        "hidden": [8],
        "d_p": 2,
        "seed": 3,
        "weights": {"beta": 0.02}
    });
    let config_path = dir.path().join("run.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert_success(&out);
    let trace = fs::read_to_string(run_dir.join("trace.log")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
    assert!(run_dir.join("metrics.json").exists());
}
