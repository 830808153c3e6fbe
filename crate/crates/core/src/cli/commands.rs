use std::path::Path;

use chrono::Duration;
use serde::Serialize;
use serde_json::json;

use super::config::ExperimentConfig;
use super::{bench, CliError, CliResult, Command};
use crate::adaptation::{adapt, evaluate_checkpoint, evaluate_transfer, AdaptScope};
use crate::baselines::{
    fit_adaboost, fit_gradient_boosting, fit_random_forest, EnsembleKind, EnsembleModel, Matrix,
    ENSEMBLE_EXTENSION,
};
use crate::data::{
    align_join, ingest_csv, prepare_frame, resample_mean, CsvSchema, LabeledDataset, PrepareOptions,
    TimeSeriesFrame, CANONICAL_CHANNELS,
};
use crate::evaluation::{compute_metrics, trace_saturation, Metrics, MetricsMeta};
use crate::features::{fit_importance, select_features};
use crate::model::{ArchitectureSpec, Model, ModelCheckpoint, CHECKPOINT_EXTENSION};
use crate::synth::{make_domain_pair, ClimateParams};
use crate::training::{train_source, RunTrace};

pub(super) const SATURATION_WINDOW: usize = 10;
pub(super) const SATURATION_EPSILON: f64 = 0.005;

pub(super) fn dispatch(command: Command, config: &ExperimentConfig) -> CliResult<()> {
    match command {
        Command::Synth {
            out,
            days,
            step_minutes,
            shift,
            preset,
        } => synth(config, &out, days, step_minutes, shift, preset.as_deref()),
        Command::Prepare {
            input,
            schema,
            solar,
            solar_schema,
            domain,
            out,
        } => prepare(config, &input, &schema, solar.as_deref(), solar_schema.as_deref(), &domain, &out),
        Command::SelectFeatures {
            data,
            out,
            k,
            no_feature_selection,
        } => select(config, &data, &out, k, no_feature_selection),
        Command::Train { data, out } => train(config, &data, &out),
        Command::Adapt {
            checkpoint,
            data,
            out,
            scope,
        } => adapt_cmd(config, &checkpoint, &data, &out, scope),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
        } => eval(config, &checkpoint, &data, &out, &split),
        Command::Baseline { kind, data, out } => baseline(config, kind, &data, &out),
        Command::Bench {
            out,
            no_feature_selection,
        } => bench::run(config, &out, !no_feature_selection && config.feature_selection),
    }
}

pub(super) fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::compute("output", format!("{}: {e}", path.display())))
}

pub(super) fn require_path(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

pub(super) fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::compute("output", e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::compute("output", format!("{}: {e}", path.display())))
}

pub(super) fn write_manifest(out: &Path, command: &str, config: &ExperimentConfig) -> CliResult<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": config.hash(),
            "seed": config.seed,
            "config": config,
        }),
    )
}

fn write_metrics(out: &Path, stem: &str, metrics: &Metrics) -> CliResult<()> {
    write_json(&out.join(format!("{stem}.json")), metrics)?;
    metrics
        .write_csv(&out.join(format!("{stem}.csv")))
        .map_err(|e| CliError::compute("output", e))
}

fn load_split(dir: &Path, split: &str) -> CliResult<LabeledDataset> {
    let path = dir.join(split);
    require_path(&path, "dataset split")?;
    LabeledDataset::load(&path).map_err(|e| CliError::compute("load dataset", e))
}

fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    require_path(path, "checkpoint")?;
    ModelCheckpoint::load(path).map_err(|e| CliError::compute("load checkpoint", e))
}

/// Restricts `data` to the checkpoint's feature list.
fn align_features(data: &LabeledDataset, ck: &ModelCheckpoint) -> CliResult<LabeledDataset> {
    if data.feature_names() == ck.feature_names.as_slice() {
        return Ok(data.clone());
    }
    data.select_features(&ck.feature_names)
        .map_err(|e| CliError::compute("feature alignment", e))
}

fn synth(
    config: &ExperimentConfig,
    out: &Path,
    days: Option<usize>,
    step_minutes: Option<i64>,
    shift: Option<f64>,
    preset: Option<&str>,
) -> CliResult<()> {
    let mut base = match preset {
        Some(name) => ClimateParams::preset(name).ok_or_else(|| CliError::usage(format!("unknown preset {name:?}")))?,
        None => config.synth.base.clone(),
    };
    base.seed = config.seed;
    let days = days.unwrap_or(config.synth.days);
    let step = Duration::minutes(step_minutes.unwrap_or(config.synth.step_minutes));
    let shift = shift.unwrap_or(config.synth.shift);
    let (source, target) = make_domain_pair(&base, shift, days, step).map_err(|e| CliError::compute("synth", e))?;
    ensure_dir(out)?;
    for (name, frame) in [("source.csv", &source), ("target.csv", &target)] {
        frame
            .write_csv(&out.join(name))
            .map_err(|e| CliError::compute("synth", e))?;
    }
    write_json(
        &out.join("schema.json"),
        &CsvSchema::identity("timestamp", CANONICAL_CHANNELS),
    )?;
    write_manifest(out, "synth", config)
}

fn load_frame(config: &ExperimentConfig, input: &Path, schema: &Path) -> CliResult<TimeSeriesFrame> {
    require_path(schema, "schema file")?;
    require_path(input, "input file")?;
    let schema = CsvSchema::from_json_file(schema).map_err(|e| CliError::usage(format!("schema: {e}")))?;
    let frame = ingest_csv(input, &schema).map_err(|e| CliError::compute("ingest", e))?;
    let Some(minutes) = config.resample_minutes else {
        return Ok(frame);
    };
    let target = Duration::minutes(minutes);
    match frame.step() {
        Some(step) if step < target => resample_mean(&frame, target).map_err(|e| CliError::compute("resample", e)),
        _ => Ok(frame),
    }
}

fn prepare(
    config: &ExperimentConfig,
    input: &Path,
    schema: &Path,
    solar: Option<&Path>,
    solar_schema: Option<&Path>,
    domain: &str,
    out: &Path,
) -> CliResult<()> {
    let weather = load_frame(config, input, schema)?;
    let (frame, join) = match solar {
        Some(solar) => {
            let solar_schema = solar_schema.ok_or_else(|| CliError::usage("--solar requires --solar-schema"))?;
            let solar = load_frame(config, solar, solar_schema)?;
            let (frame, report) = align_join(&weather, &solar).map_err(|e| CliError::compute("join", e))?;
            (frame, Some(report))
        }
        None => (weather, None),
    };
    let opts = PrepareOptions {
        n_classes: config.n_classes,
        ratios: config.split,
        standardize: config.standardize,
        ..PrepareOptions::new(domain)
    };
    let prepared = prepare_frame(&frame, &opts).map_err(|e| CliError::compute("prepare", e))?;
    ensure_dir(out)?;
    for (name, ds) in [("train", &prepared.train), ("val", &prepared.val), ("test", &prepared.test)] {
        ds.save(&out.join(name)).map_err(|e| CliError::compute("persist", e))?;
    }
    write_json(
        &out.join("summary.json"),
        &json!({
            "domain": domain,
            "join": join,
            "report": prepared.report,
            "binning": prepared.train.binning(),
            "feature_names": prepared.train.feature_names(),
        }),
    )?;
    write_manifest(out, "prepare", config)
}

fn select(
    config: &ExperimentConfig,
    data: &Path,
    out: &Path,
    k: Option<usize>,
    no_feature_selection: bool,
) -> CliResult<()> {
    let splits: Vec<LabeledDataset> = ["train", "val", "test"]
        .iter()
        .map(|s| load_split(data, s))
        .collect::<CliResult<_>>()?;
    let report = fit_importance(&splits[0], config.importance_trees, config.seed)
        .map_err(|e| CliError::compute("importance", e))?;
    let chosen = if no_feature_selection || !config.feature_selection {
        report.features.clone()
    } else {
        let k = k.unwrap_or(config.k_features);
        select_features(&report, k).map_err(|e| CliError::usage(e.to_string()))?
    };
    ensure_dir(out)?;
    report
        .save(&out.join("importance.json"))
        .map_err(|e| CliError::compute("output", e))?;
    for (name, ds) in ["train", "val", "test"].iter().zip(&splits) {
        ds.select_features(&chosen)
            .and_then(|d| d.save(&out.join(name)))
            .map_err(|e| CliError::compute("persist", e))?;
    }
    write_json(&out.join("selection.json"), &json!({ "selected": chosen }))?;
    write_manifest(out, "select-features", config)
}

pub(super) fn its_per_sec(trace: &RunTrace) -> f64 {
    crate::evaluation::trace_throughput(trace).unwrap_or_else(|_| trace.its_per_sec())
}

fn train(config: &ExperimentConfig, data: &Path, out: &Path) -> CliResult<()> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let test = load_split(data, "test")?;
    let spec = ArchitectureSpec::default_for(train.n_features(), train.n_classes());
    let model = Model::build(&spec, config.seed).map_err(|e| CliError::compute("model", e))?;
    let (ck, trace) = train_source(model, &train, &val, &config.train).map_err(|e| CliError::compute("train", e))?;
    let mut metrics = evaluate_checkpoint(&ck, &test).map_err(|e| CliError::compute("evaluate", e))?;
    metrics.meta.arm = Some("source".into());
    ensure_dir(out)?;
    ck.save(&out.join(format!("model.{CHECKPOINT_EXTENSION}")))
        .map_err(|e| CliError::compute("checkpoint", e))?;
    trace
        .write_csv(&out.join("trace.csv"))
        .map_err(|e| CliError::compute("output", e))?;
    write_metrics(out, "metrics", &metrics)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "domain": train.domain_id(),
            "epochs": trace.records.len(),
            "best_epoch": trace.best_epoch,
            "best_val_acc": trace.best_val_acc(),
            "test_accuracy": metrics.accuracy,
            "test_weighted_f1": metrics.weighted_f1,
            "parameter_count": ck.model.parameter_count(),
            "its_per_sec": its_per_sec(&trace),
        }),
    )?;
    write_manifest(out, "train", config)
}

fn adapt_cmd(
    config: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    scope: Option<AdaptScope>,
) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let train = align_features(&load_split(data, "train")?, &ck)?;
    let val = align_features(&load_split(data, "val")?, &ck)?;
    let test = align_features(&load_split(data, "test")?, &ck)?;
    let mut cfg = config.adapt.clone();
    if let Some(scope) = scope {
        cfg.scope = scope;
    }
    let transfer = evaluate_transfer(&ck, &test).map_err(|e| CliError::compute("evaluate", e))?;
    let (adapted, trace) = adapt(&ck, &train, &val, &cfg).map_err(|e| CliError::compute("adapt", e))?;
    let mut metrics = evaluate_checkpoint(&adapted, &test).map_err(|e| CliError::compute("evaluate", e))?;
    metrics.meta.arm = Some("adapt".into());
    ensure_dir(out)?;
    adapted
        .save(&out.join(format!("model.{CHECKPOINT_EXTENSION}")))
        .map_err(|e| CliError::compute("checkpoint", e))?;
    trace
        .write_csv(&out.join("trace.csv"))
        .map_err(|e| CliError::compute("output", e))?;
    write_metrics(out, "metrics", &metrics)?;
    write_metrics(out, "transfer_metrics", &transfer)?;
    let saturation = trace_saturation(&trace, SATURATION_WINDOW, SATURATION_EPSILON)
        .map_err(|e| CliError::compute("evaluate", e))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "source": ck.provenance.domain_id,
            "target": train.domain_id(),
            "scope": cfg.scope.to_string(),
            "epochs": trace.records.len(),
            "accuracy_without_adaptation": transfer.accuracy,
            "accuracy_with_adaptation": metrics.accuracy,
            "weighted_f1_without_adaptation": transfer.weighted_f1,
            "weighted_f1_with_adaptation": metrics.weighted_f1,
            "trainable_parameters": trainable_count(&ck, cfg.scope),
            "saturation": saturation,
            "its_per_sec": its_per_sec(&trace),
        }),
    )?;
    write_manifest(out, "adapt", config)
}

fn trainable_count(ck: &ModelCheckpoint, scope: AdaptScope) -> usize {
    let mut model = ck.model.clone();
    match crate::adaptation::apply_freeze(&mut model, scope) {
        Ok(()) => model.trainable_count(),
        Err(_) => 0,
    }
}

fn eval(config: &ExperimentConfig, checkpoint: &Path, data: &Path, out: &Path, split: &str) -> CliResult<()> {
    if !["train", "val", "test"].contains(&split) {
        return Err(CliError::usage(format!("unknown split {split:?} (train|val|test)")));
    }
    let ck = load_checkpoint(checkpoint)?;
    let ds = align_features(&load_split(data, split)?, &ck)?;
    let mut metrics = evaluate_checkpoint(&ck, &ds).map_err(|e| CliError::compute("evaluate", e))?;
    metrics.meta.arm = Some(
        if ck.provenance.scope.is_some() {
            "adapt"
        } else if ds.domain_id() == ck.provenance.domain_id {
            "source"
        } else {
            "no-adapt"
        }
        .into(),
    );
    ensure_dir(out)?;
    write_metrics(out, "metrics", &metrics)?;
    write_manifest(out, "eval", config)
}

pub(super) fn fit_baseline(
    config: &ExperimentConfig,
    kind: EnsembleKind,
    train: &LabeledDataset,
) -> crate::Result<EnsembleModel> {
    let x = Matrix::new(train.features(), train.n_features())?;
    let (y, k) = (train.labels(), train.n_classes());
    let b = &config.baselines;
    match kind {
        EnsembleKind::Rf => fit_random_forest(x, y, k, &b.rf, config.seed),
        EnsembleKind::Adaboost => fit_adaboost(x, y, k, b.adaboost_rounds, config.seed),
        EnsembleKind::Gbm => fit_gradient_boosting(x, y, k, b.gbm_rounds, b.gbm_learning_rate, b.gbm_depth, config.seed),
    }
}

pub(super) fn evaluate_baseline(model: &EnsembleModel, data: &LabeledDataset) -> crate::Result<Metrics> {
    let pred = model.predict(Matrix::new(data.features(), data.n_features())?)?;
    let metrics = compute_metrics(data.labels(), &pred, data.n_classes())?;
    Ok(metrics.with_meta(MetricsMeta {
        source: Some(data.domain_id().to_string()),
        target: Some(data.domain_id().to_string()),
        arm: Some(model.kind.to_string()),
        scope: None,
        standardizer_domain: Some(data.domain_id().to_string()),
    }))
}

fn baseline(config: &ExperimentConfig, kind: EnsembleKind, data: &Path, out: &Path) -> CliResult<()> {
    let train = load_split(data, "train")?;
    let test = load_split(data, "test")?;
    let model = fit_baseline(config, kind, &train).map_err(|e| CliError::compute("baseline", e))?;
    let metrics = evaluate_baseline(&model, &test).map_err(|e| CliError::compute("evaluate", e))?;
    ensure_dir(out)?;
    model
        .save(&out.join(format!("model.{ENSEMBLE_EXTENSION}")))
        .map_err(|e| CliError::compute("output", e))?;
    write_metrics(out, "metrics", &metrics)?;
    write_manifest(out, "baseline", config)
}
