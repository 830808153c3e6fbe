//! Classification metrics, convergence analysis and throughput measurement.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::RunTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Where a set of metrics came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsMeta {
    pub source: Option<String>,
    pub target: Option<String>,
    /// `source`, `no-adapt`, `adapt`, `scratch` or a baseline kind.
    pub arm: Option<String>,
    pub scope: Option<String>,
    /// Domain whose statistics standardized the evaluated inputs.
    pub standardizer_domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub n_samples: usize,
    pub meta: MetricsMeta,
}

pub const METRICS_CSV_HEADER: [&str; 9] = [
    "source",
    "target",
    "arm",
    "scope",
    "n_samples",
    "accuracy",
    "macro_f1",
    "weighted_f1",
    "micro_f1",
];

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            left: vec![y_true.len()],
            right: vec![y_pred.len()],
        });
    }
    if y_true.is_empty() {
        return Err(Error::invalid("cannot compute metrics on zero samples"));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    let n = y_true.len();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let (fp, fn_) = (predicted - tp, support - tp);
        if predicted == 0 || support == 0 {
            log::warn!("class {c}: precision or recall undefined, reported as 0");
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_class.push(ClassMetrics {
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support,
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / n_classes as f64;
    let weighted_f1 = per_class
        .iter()
        .map(|m| m.support as f64 / n as f64 * m.f1)
        .sum();
    Ok(Metrics {
        confusion,
        accuracy: ratio(tp_all, n),
        per_class,
        macro_f1,
        weighted_f1,
        micro_f1: ratio(2 * tp_all, 2 * tp_all + fp_all + fn_all),
        n_samples: n,
        meta: MetricsMeta::default(),
    })
}

impl Metrics {
    pub fn with_meta(mut self, meta: MetricsMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        vec![
            opt(&self.meta.source),
            opt(&self.meta.target),
            opt(&self.meta.arm),
            opt(&self.meta.scope),
            self.n_samples.to_string(),
            self.accuracy.to_string(),
            self.macro_f1.to_string(),
            self.weighted_f1.to_string(),
            self.micro_f1.to_string(),
        ]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(METRICS_CSV_HEADER).map_err(csv_err)?;
        w.write_record(self.csv_row()).map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Saturation {
    pub epoch: usize,
    /// False when no epoch had a full look-ahead window that stayed flat;
    /// `epoch` is then the last epoch.
    pub saturated: bool,
}

/// First epoch after which validation accuracy gains at most `epsilon` over
/// the next `window` epochs.
pub fn epochs_to_saturation(val_acc: &[f64], window: usize, epsilon: f64) -> Result<Saturation> {
    if val_acc.is_empty() {
        return Err(Error::invalid("trace is empty"));
    }
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let last = val_acc.len() - 1;
    for e in 0..val_acc.len().saturating_sub(window) {
        let ahead = val_acc[e + 1..=e + window]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if ahead - val_acc[e] <= epsilon {
            return Ok(Saturation {
                epoch: e,
                saturated: true,
            });
        }
    }
    Ok(Saturation {
        epoch: last,
        saturated: false,
    })
}

pub fn trace_saturation(trace: &RunTrace, window: usize, epsilon: f64) -> Result<Saturation> {
    let acc: Vec<f64> = trace.records.iter().map(|r| r.val_acc).collect();
    epochs_to_saturation(&acc, window, epsilon)
}

/// Optimizer steps per second over every epoch but the first.
pub fn trace_throughput(trace: &RunTrace) -> Result<f64> {
    let rest = trace.records.get(1..).unwrap_or_default();
    let steps: usize = rest.iter().map(|r| r.iterations).sum();
    let secs: f64 = rest.iter().map(|r| r.seconds).sum();
    if rest.is_empty() || secs <= 0.0 {
        return Err(Error::invalid("throughput needs at least two timed epochs"));
    }
    Ok(steps as f64 / secs)
}

/// Time source for throughput measurement.
pub trait Clock {
    fn now(&self) -> Duration;
}

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Runs `epochs` calls of `run_epoch` (each returning the number of optimizer
/// steps it took) and reports steps per second. The first call is warm-up
/// and not counted.
pub fn measure_throughput<F>(epochs: usize, run_epoch: F) -> Result<f64>
where
    F: FnMut() -> Result<usize>,
{
    measure_throughput_with(&WallClock::default(), epochs, run_epoch)
}

pub fn measure_throughput_with<C, F>(clock: &C, epochs: usize, mut run_epoch: F) -> Result<f64>
where
    C: Clock,
    F: FnMut() -> Result<usize>,
{
    if epochs < 2 {
        return Err(Error::invalid("need a warm-up epoch plus at least one timed epoch"));
    }
    run_epoch()?;
    let start = clock.now();
    let mut steps = 0;
    for _ in 1..epochs {
        steps += run_epoch()?;
    }
    let elapsed = (clock.now() - start).as_secs_f64();
    if elapsed <= 0.0 {
        return Err(Error::invalid("zero-duration run"));
    }
    Ok(steps as f64 / elapsed)
}
