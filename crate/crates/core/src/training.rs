//! Mini-batch training loop shared by source training and adaptation.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelCheckpoint, Provenance};
use crate::numerics::{argmax_rows, AdamConfig, AdamState, BnMode, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 1000,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    Scratch,
    AdaptPartial,
    AdaptFull,
}

impl fmt::Display for TraceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scratch => "scratch",
            Self::AdaptPartial => "adapt-partial",
            Self::AdaptFull => "adapt-full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Wall-clock seconds spent on optimizer steps in this epoch.
    pub seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub mode: TraceMode,
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl RunTrace {
    pub fn total_iterations(&self) -> usize {
        self.records.iter().map(|r| r.iterations).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    /// Optimizer steps per wall-clock second over the whole run.
    pub fn its_per_sec(&self) -> f64 {
        self.total_iterations() as f64 / self.total_seconds()
    }

    pub fn best_val_acc(&self) -> f64 {
        self.records
            .get(self.best_epoch)
            .map_or(f64::NAN, |r| r.val_acc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "train_loss", "train_acc", "val_acc", "seconds", "iterations"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
                r.seconds.to_string(),
                r.iterations.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Contiguous batch boundaries; a trailing batch of one row joins the
/// previous batch so batch-norm always sees at least two rows.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        out.pop();
        if let Some(last) = out.last_mut() {
            last.end = n;
        }
    }
    out
}

fn check_compatible(model: &Model, data: &LabeledDataset, what: &str) -> Result<()> {
    let spec = model.spec();
    if data.n_features() != spec.n_features {
        return Err(Error::invalid(format!(
            "{what} has {} features, model expects {}",
            data.n_features(),
            spec.n_features
        )));
    }
    if data.n_classes() != spec.n_classes {
        return Err(Error::invalid(format!(
            "{what} has {} classes, model expects {}",
            data.n_classes(),
            spec.n_classes
        )));
    }
    Ok(())
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate_epoch(model: &Model, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    check_compatible(model, data, "dataset")?;
    let k = model.spec().n_classes;
    let logits = model.logits(data.features())?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.chunks(k).zip(data.labels()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    for (p, &y) in argmax_rows(&logits, k).into_iter().zip(data.labels()) {
        correct += usize::from(p == y);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Optimizes the trainable parameters of `model` and returns the weights
/// from the epoch with the best validation accuracy.
pub(crate) fn fit(
    mut model: Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    bn_mode: BnMode,
    mode: TraceMode,
) -> Result<(Model, RunTrace)> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::invalid("training needs at least 2 training rows and 1 validation row"));
    }
    check_compatible(&model, train, "training set")?;
    check_compatible(&model, val, "validation set")?;

    let n_features = train.n_features();
    let n_classes = model.spec().n_classes;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches = batch_ranges(train.len(), cfg.batch_size);

    let mut best = (model.clone(), f64::NEG_INFINITY, 0usize);
    let mut records = Vec::new();
    for epoch in 0..cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let started = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for range in &batches {
            let idx = &order[range.clone()];
            let mut x = Vec::with_capacity(idx.len() * n_features);
            let mut y = Vec::with_capacity(idx.len());
            for &i in idx {
                x.extend_from_slice(train.row(i));
                y.push(train.labels()[i]);
            }
            let x = Tensor::new(&[idx.len(), n_features], x)?;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &x, bn_mode)?;
            let preds = argmax_rows(tape.value(pass.logits), n_classes);
            correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += loss_value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &pass)?;
            adam.step(model.params_mut())?;
        }
        let seconds = started.elapsed().as_secs_f64();
        let (_, val_acc) = evaluate_epoch(&model, val)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            seconds,
            iterations: batches.len(),
        });
        log::debug!("{mode} epoch {epoch}: val_acc {val_acc:.4}");
        if val_acc > best.1 {
            best = (model.clone(), val_acc, epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let trace = RunTrace {
        mode,
        records,
        best_epoch: best.2,
    };
    Ok((best.0, trace))
}

/// Trains every parameter of `model` on source data and packages the best
/// epoch as a checkpoint carrying the source preprocessing state.
pub fn train_source(
    model: Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, RunTrace)> {
    if train.feature_names() != val.feature_names() {
        return Err(Error::invalid("training and validation features differ"));
    }
    if train.binning() != val.binning() {
        return Err(Error::invalid("training and validation binning differ"));
    }
    let mut model = model;
    model.set_all_trainable(true);
    let (model, trace) = fit(model, train, val, cfg, BnMode::Train, TraceMode::Scratch)?;
    let checkpoint = ModelCheckpoint {
        model,
        standardizer: train.standardizer().clone(),
        feature_names: train.feature_names().to_vec(),
        binning: train.binning().clone(),
        provenance: Provenance::new(train.domain_id(), cfg.seed, trace.records.len()),
    };
    Ok((checkpoint, trace))
}
