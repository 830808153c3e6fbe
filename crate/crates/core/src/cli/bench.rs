use std::path::Path;

use chrono::Duration;

use super::commands::{ensure_dir, its_per_sec, write_manifest, SATURATION_EPSILON, SATURATION_WINDOW};
use super::config::ExperimentConfig;
use super::{CliError, CliResult};
use crate::adaptation::{adapt, evaluate_checkpoint, evaluate_transfer, AdaptScope};
use crate::data::{prepare_frame, LabeledDataset, PrepareOptions, PreparedDomain};
use crate::evaluation::{trace_saturation, Metrics};
use crate::features::{fit_importance, select_features};
use crate::model::{ArchitectureSpec, Model};
use crate::synth::{generate_domain, ClimateParams};
use crate::training::{train_source, RunTrace};

pub const BENCH_COLUMNS: [&str; 8] = [
    "source",
    "target",
    "arm",
    "scope",
    "accuracy",
    "weighted_f1",
    "its_per_sec",
    "saturation_epoch",
];

struct Splits {
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
}

fn restrict(p: &PreparedDomain, features: &[String]) -> crate::Result<Splits> {
    Ok(Splits {
        train: p.train.select_features(features)?,
        val: p.val.select_features(features)?,
        test: p.test.select_features(features)?,
    })
}

fn row(source: &str, target: &str, arm: &str, scope: &str, m: &Metrics, trace: Option<&RunTrace>) -> CliResult<Vec<String>> {
    let (speed, sat) = match trace {
        Some(t) => {
            let s = trace_saturation(t, SATURATION_WINDOW, SATURATION_EPSILON).map_err(|e| CliError::compute("bench", e))?;
            (format!("{:.3}", its_per_sec(t)), s.epoch.to_string())
        }
        None => (String::new(), String::new()),
    };
    Ok(vec![
        source.into(),
        target.into(),
        arm.into(),
        scope.into(),
        m.accuracy.to_string(),
        m.weighted_f1.to_string(),
        speed,
        sat,
    ])
}

pub(super) fn run(config: &ExperimentConfig, out: &Path, feature_selection: bool) -> CliResult<()> {
    let fail = |stage: &'static str| move |e: crate::Error| CliError::compute(stage, e);
    let step = Duration::minutes(config.synth.step_minutes);
    let mut domains = Vec::new();
    for (i, name) in config.synth.domains.iter().enumerate() {
        let params = ClimateParams::preset(name).ok_or_else(|| CliError::usage(format!("unknown preset {name:?}")))?;
        let params = ClimateParams {
            seed: config.seed.wrapping_add(i as u64),
            ..params
        };
        let frame = generate_domain(&params, config.synth.days, step).map_err(fail("synth"))?;
        let opts = PrepareOptions {
            n_classes: config.n_classes,
            ratios: config.split,
            standardize: config.standardize,
            ..PrepareOptions::new(name.as_str())
        };
        domains.push((name.clone(), prepare_frame(&frame, &opts).map_err(fail("prepare"))?));
    }
    if domains.len() < 2 {
        return Err(CliError::usage("bench needs at least two domains"));
    }

    let traces = out.join("traces");
    ensure_dir(&traces)?;
    let mut rows = Vec::new();
    for (s_name, s_prep) in &domains {
        let features = if feature_selection {
            let report = fit_importance(&s_prep.train, config.importance_trees, config.seed).map_err(fail("importance"))?;
            select_features(&report, config.k_features.min(report.features.len())).map_err(fail("importance"))?
        } else {
            config.features.clone()
        };
        let src = restrict(s_prep, &features).map_err(fail("features"))?;
        let spec = ArchitectureSpec::default_for(features.len(), config.n_classes);
        let model = Model::build(&spec, config.seed).map_err(fail("model"))?;
        let (ck, trace) = train_source(model, &src.train, &src.val, &config.train).map_err(fail("train"))?;
        trace
            .write_csv(&traces.join(format!("{s_name}_source.csv")))
            .map_err(fail("output"))?;
        for (t_name, t_prep) in &domains {
            if t_name == s_name {
                continue;
            }
            log::info!("bench cell {s_name} -> {t_name}");
            let tgt = restrict(t_prep, &features).map_err(fail("features"))?;
            let without = evaluate_transfer(&ck, &tgt.test).map_err(fail("evaluate"))?;
            rows.push(row(s_name, t_name, "no-adapt", "", &without, None)?);
            for scope in [AdaptScope::Partial, AdaptScope::Full] {
                let cfg = crate::adaptation::AdaptConfig {
                    scope,
                    ..config.adapt.clone()
                };
                let (adapted, trace) = adapt(&ck, &tgt.train, &tgt.val, &cfg).map_err(fail("adapt"))?;
                let m = evaluate_checkpoint(&adapted, &tgt.test).map_err(fail("evaluate"))?;
                trace
                    .write_csv(&traces.join(format!("{s_name}_{t_name}_adapt-{scope}.csv")))
                    .map_err(fail("output"))?;
                rows.push(row(s_name, t_name, "adapt", &scope.to_string(), &m, Some(&trace))?);
            }
            let model = Model::build(&spec, config.seed.wrapping_add(1)).map_err(fail("model"))?;
            let (scratch, trace) = train_source(model, &tgt.train, &tgt.val, &config.train).map_err(fail("train"))?;
            let m = evaluate_checkpoint(&scratch, &tgt.test).map_err(fail("evaluate"))?;
            trace
                .write_csv(&traces.join(format!("{s_name}_{t_name}_scratch.csv")))
                .map_err(fail("output"))?;
            rows.push(row(s_name, t_name, "scratch", "", &m, Some(&trace))?);
        }
    }

    let path = out.join("table.csv");
    let csv_err = |e: csv::Error| CliError::compute("output", e);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(BENCH_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::compute("output", e))?;
    write_manifest(out, "bench", config)
}
