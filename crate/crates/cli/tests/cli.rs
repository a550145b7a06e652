use std::path::Path;
use std::process::{Command, Output};

use left_core::Checkpoint;

fn left(args: &[&str], data_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_left"))
        .args(args)
        .env("LEFT_DATA_ROOT", data_root)
        .env_remove("RUST_LOG")
        .output()
        .expect("run left")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .parse()
        .unwrap()
}

fn train_small(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let run = dir.join(name);
    ok(&left(
        &["train", "--dataset", "synth", "--synth-length", "4000", "--epochs", "2", "--seed", seed, "--out", run.to_str().unwrap()],
        dir,
    ));
    run
}

#[test]
fn smoke_train_on_synth_writes_checkpoints_and_scores_well() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = left(
        &["train", "--dataset", "synth", "--epochs", "2", "--lr", "1e-3", "--batch-size", "4", "--out", run.to_str().unwrap()],
        dir.path(),
    );
    ok(&out);
    for f in ["model.ckpt", "config.toml", "train_log.tsv", "checkpoints/best.ckpt", "checkpoints/epoch-002.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let text = ok(&left(&["eval", "--run", run.to_str().unwrap()], dir.path()));
    for key in ["vus_roc", "vus_pr", "auc_roc", "auc_pr", "range_auc_roc", "range_auc_pr", "f1", "accuracy"] {
        metric(&text, key);
    }
    assert!(metric(&text, "vus_roc") >= 0.8, "{text}");
    assert_eq!(std::fs::read_to_string(run.join("eval/metrics.toml")).unwrap(), text);
    assert!(run.join("eval/plots/scores-group0.svg").exists());
    assert!(run.join("eval/scores.tsv").exists());
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = left(&["train", "--dataset", "NOPE", "--out", dir.path().join("r").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&dir.path().join("NOPE").display().to_string()), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a", "7");
    let b = train_small(dir.path(), "b", "7");
    let (ca, cb) = (Checkpoint::load(&a.join("model.ckpt")).unwrap(), Checkpoint::load(&b.join("model.ckpt")).unwrap());
    assert_eq!(ca.params, cb.params);
    assert_eq!((ca.adam_m, ca.adam_v), (cb.adam_m, cb.adam_v));

    let first = a.join("e1");
    let second = a.join("e2");
    for out in [&first, &second] {
        ok(&left(&["eval", "--run", a.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path()));
    }
    for f in ["metrics.toml", "scores.tsv"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_against_a_mismatched_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run", "1");
    let data = dir.path().join("data");
    ok(&left(&["synth", "--out", data.to_str().unwrap(), "--name", "wide", "--length", "4000"], dir.path()));
    let manifest = data.join("wide/manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("window = 96", "window = 128");
    std::fs::write(&manifest, text).unwrap();
    let out = left(&["eval", "--run", run.to_str().unwrap(), "--dataset", "wide"], &data);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    ok(&left(&["synth", "--out", dir.path().to_str().unwrap(), "--length", "3000", "--seed", "3"], dir.path()));
    let ds = left_core::load_dataset(dir.path(), "synth").unwrap();
    assert_eq!(ds.channels(), 3);
    assert_eq!(ds.train.nrows() + ds.validation.nrows() + ds.test.nrows(), 3000);
    assert!(ds.test_labels.contains(&1));
}

#[test]
fn ablate_emits_16_component_and_5_fusion_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ablate");
    let text = ok(&left(
        &["ablate", "--dataset", "synth", "--synth-length", "3000", "--epochs", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    ));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("component\t")).count(), 16);
    assert_eq!(rows.iter().filter(|r| r.starts_with("fusion\t")).count(), 5);
    assert_eq!(std::fs::read_to_string(out_dir.join("ablation.tsv")).unwrap(), text);
    let snapshot = std::fs::read_to_string(out_dir.join("wo-learnable_filterbank/config.toml")).unwrap();
    assert!(snapshot.contains("learnable_filterbank = false"));
    let ckpt = Checkpoint::load(&out_dir.join("wo-learnable_filterbank/model.ckpt")).unwrap();
    let u = ckpt.names.iter().position(|n| n == "filterbank.u").unwrap();
    assert!(ckpt.params[u].iter().all(|&v| v == 0.0));
}

#[test]
fn score_sweep_reuses_one_model_and_has_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run", "2");
    let out = dir.path().join("sweep");
    let text = ok(&left(
        &[
            "sweep", "--grid", "score", "--first", "0.25,0.5", "--second", "0,0.5,1", "--run", run.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ],
        dir.path(),
    ));
    let header: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(&header[..4], ["alpha_cyc", "alpha_ms", "vus_roc", "vus_pr"]);
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(!out.join("base").exists());
    assert!(out.join("sweep-score.tsv").exists());
}

#[test]
fn loss_sweep_trains_one_cell_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let text = ok(&left(
        &[
            "sweep", "--grid", "loss", "--first", "0.5", "--second", "0.1,1", "--dataset", "synth", "--synth-length", "3000",
            "--epochs", "1", "--out", out.to_str().unwrap(),
        ],
        dir.path(),
    ));
    assert_eq!(text.lines().count(), 1 + 2);
    assert!(out.join("cyc0.5-cons0.1/model.ckpt").exists());
}
