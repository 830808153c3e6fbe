use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use helios::cli::BENCH_COLUMNS;

fn helios(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_helios"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = helios(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    write_config(
        dir,
        json!({
            "synth": {"days": 30, "step_minutes": 60},
            "train": {"max_epochs": 3, "batch_size": 64, "lr": 1e-3},
            "adapt": {"max_epochs": 3, "batch_size": 64, "lr": 1e-3},
            "importance_trees": 10,
            "baselines": {"rf": {"n_trees": 10}, "adaboost_rounds": 10, "gbm_rounds": 10},
        }),
    )
}

/// Synthesizes a pair and prepares both domains under `dir`.
fn prepared_pair(dir: &Path, config: &str) -> (String, String) {
    ok(&["synth", "--config", config, "--out", &path(dir, "syn")]);
    let schema = path(dir, "syn/schema.json");
    for (csv, domain) in [("source.csv", "src"), ("target.csv", "tgt")] {
        ok(&[
            "prepare",
            "--config",
            config,
            "--input",
            &path(dir, &format!("syn/{csv}")),
            "--schema",
            &schema,
            "--domain",
            domain,
            "--out",
            &path(dir, domain),
        ]);
    }
    (path(dir, "src"), path(dir, "tgt"))
}

/// Every file below `root`, as sorted paths relative to it.
fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                pending.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path(dir.path(), "nope.csv");
    let out = helios(&["prepare", "--input", &missing, "--schema", &missing, "--domain", "d", "--out", &path(dir.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));

    let bad = write_config(dir.path(), json!({"train": {"lr": 0.01, "momentum": 0.9}}));
    assert_eq!(helios(&["synth", "--config", &bad, "--out", &path(dir.path(), "s")]).status.code(), Some(2));

    let zero_lr = write_config(dir.path(), json!({"train": {"lr": 0.0}}));
    assert_eq!(helios(&["synth", "--config", &zero_lr, "--out", &path(dir.path(), "s")]).status.code(), Some(2));

    assert_eq!(helios(&["fly"]).status.code(), Some(2));
    assert_eq!(helios(&["baseline", "--kind", "svm", "--data", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn thread_count_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_helios"))
        .args(["synth", "--out", &path(dir.path(), "s"), "--days", "2"])
        .env("HELIOS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_year_at_half_hour_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), json!({"synth": {"days": 365, "step_minutes": 30}}));
    let (src, _) = prepared_pair(dir.path(), &config);
    let summary = read_json(Path::new(&src).join("summary.json"));
    let report = &summary["report"];
    assert_eq!(report["rows_in"], 17_520);
    let total: u64 = ["n_train", "n_val", "n_test"].iter().map(|k| report[k].as_u64().unwrap()).sum();
    assert_eq!(total, 17_520);
    let meta = read_json(Path::new(&src).join("train/meta.json"));
    assert_eq!(meta["n_samples"], report["n_train"]);
    assert_eq!(meta["feature_names"].as_array().unwrap().len(), 10);
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (src, _) = prepared_pair(dir.path(), &config);
    let again = path(dir.path(), "again");
    ok(&[
        "prepare",
        "--config",
        &config,
        "--input",
        &path(dir.path(), "syn/source.csv"),
        "--schema",
        &path(dir.path(), "syn/schema.json"),
        "--domain",
        "src",
        "--out",
        &again,
    ]);
    let (a, b) = (Path::new(&src), Path::new(&again));
    let files = files_under(a);
    assert_eq!(files, files_under(b));
    assert!(files.iter().any(|f| f.ends_with("meta.json")));
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn synth_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        ok(&["synth", "--out", &path(dir.path(), name), "--days", "5", "--seed", seed]);
        fs::read(dir.path().join(name).join("source.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
    let manifest = read_json(dir.path().join("a/manifest.json"));
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_reproduces_training_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (src, tgt) = prepared_pair(dir.path(), &config);
    let train = path(dir.path(), "train");
    ok(&["train", "--config", &config, "--data", &src, "--out", &train]);
    let ckpt = path(dir.path(), "train/model.hsckpt");
    let eval = path(dir.path(), "eval");
    ok(&["eval", "--config", &config, "--checkpoint", &ckpt, "--data", &src, "--out", &eval]);
    let summary = read_json(dir.path().join("train/summary.json"));
    let metrics = read_json(dir.path().join("eval/metrics.json"));
    assert_eq!(summary["test_accuracy"], metrics["accuracy"]);
    assert_eq!(summary["parameter_count"], 22_597);

    let adapt = path(dir.path(), "adapt");
    ok(&["adapt", "--config", &config, "--checkpoint", &ckpt, "--data", &tgt, "--out", &adapt, "--scope", "full"]);
    let s = read_json(dir.path().join("adapt/summary.json"));
    assert_eq!(s["scope"], "full");
    assert_eq!(s["source"], "src");
    assert_eq!(s["target"], "tgt");

    // Adapting on the checkpoint's own training domain is refused.
    let again = helios(&["adapt", "--config", &config, "--checkpoint", &ckpt, "--data", &src, "--out", &adapt]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn feature_selection_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (src, _) = prepared_pair(dir.path(), &config);
    let sel = path(dir.path(), "sel");
    ok(&["select-features", "--config", &config, "--data", &src, "--out", &sel, "--k", "4"]);
    let selection = read_json(dir.path().join("sel/selection.json"));
    assert_eq!(selection["selected"].as_array().unwrap().len(), 4);
    let meta = read_json(dir.path().join("sel/train/meta.json"));
    assert_eq!(meta["feature_names"], selection["selected"]);

    for kind in ["rf", "adaboost", "gbm"] {
        let out = path(dir.path(), kind);
        ok(&["baseline", "--config", &config, "--kind", kind, "--data", &sel, "--out", &out]);
        let m = read_json(dir.path().join(kind).join("metrics.json"));
        assert_eq!(m["meta"]["arm"], kind);
        assert!(dir.path().join(kind).join("model.hsens").exists());
    }
}

#[test]
fn bench_table_has_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        json!({
            "synth": {"days": 20, "step_minutes": 60},
            "train": {"max_epochs": 2, "batch_size": 64, "lr": 1e-3},
            "adapt": {"max_epochs": 2, "batch_size": 64, "lr": 1e-3},
            "importance_trees": 5,
        }),
    );
    let out = path(dir.path(), "bench");
    ok(&["bench", "--config", &config, "--out", &out]);
    let mut reader = csv::Reader::from_path(dir.path().join("bench/table.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, BENCH_COLUMNS);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let mut cells: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    cells.dedup();
    assert_eq!(cells.len(), 6);
    assert_eq!(rows.len(), 24);
    for r in &rows {
        assert_ne!(r[0], r[1]);
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(rows.iter().any(|r| &r[2] == "adapt" && &r[3] == "partial"));
    assert!(read_json(dir.path().join("bench/manifest.json"))["config"].is_object());
}
