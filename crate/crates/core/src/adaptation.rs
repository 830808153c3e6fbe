//! Target-side adaptation of a pretrained checkpoint.
//!
//! Only the checkpoint and labeled target data enter this module. Batch-norm
//! running statistics stay frozen in both scopes; `partial` additionally
//! freezes every tensor except the two fully connected layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, Metrics, MetricsMeta};
use crate::model::{ArchitectureSpec, Model, ModelCheckpoint, Provenance};
use crate::numerics::BnMode;
use crate::training::{fit, RunTrace, TraceMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptScope {
    Partial,
    Full,
}

impl fmt::Display for AdaptScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Partial => "partial",
            Self::Full => "full",
        })
    }
}

impl FromStr for AdaptScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Self::Partial),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!("unknown scope {other:?} (partial|full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub scope: AdaptScope,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Re-fit the input standardizer on target training data. When false
    /// the checkpoint's stored standardizer is reused.
    pub restandardize: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scope: AdaptScope::Partial,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            shuffle: t.shuffle,
            restandardize: true,
        }
    }
}

impl AdaptConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            shuffle: self.shuffle,
        }
    }
}

/// Sets the trainable mask for `scope`.
pub fn apply_freeze(model: &mut Model, scope: AdaptScope) -> Result<()> {
    let head = ArchitectureSpec::head_parameter_names();
    for name in head {
        if model.param(name).is_none() {
            return Err(Error::invalid(format!(
                "model lacks {name}; partial adaptation needs two fully connected layers"
            )));
        }
    }
    for p in model.params_mut() {
        p.trainable = match scope {
            AdaptScope::Full => true,
            AdaptScope::Partial => head.contains(&p.name.as_str()),
        };
    }
    Ok(())
}

fn check_target(checkpoint: &ModelCheckpoint, data: &LabeledDataset) -> Result<()> {
    if data.feature_names() != checkpoint.feature_names.as_slice() {
        return Err(Error::invalid(format!(
            "target features {:?} differ from checkpoint features {:?}",
            data.feature_names(),
            checkpoint.feature_names
        )));
    }
    if data.n_classes() != checkpoint.binning.n_classes {
        return Err(Error::invalid(format!(
            "target has {} classes, checkpoint has {}",
            data.n_classes(),
            checkpoint.binning.n_classes
        )));
    }
    Ok(())
}

/// Fine-tunes `checkpoint` on labeled target data.
///
/// The returned checkpoint carries the target's preprocessing state and
/// records the source domain and scope in its provenance.
pub fn adapt(
    checkpoint: &ModelCheckpoint,
    target_train: &LabeledDataset,
    target_val: &LabeledDataset,
    cfg: &AdaptConfig,
) -> Result<(ModelCheckpoint, RunTrace)> {
    check_target(checkpoint, target_train)?;
    check_target(checkpoint, target_val)?;
    let source_id = &checkpoint.provenance.domain_id;
    if target_train.domain_id() == source_id {
        return Err(Error::SourceFree(format!(
            "target domain {source_id:?} is the checkpoint's own training domain"
        )));
    }
    let standardizer = if cfg.restandardize {
        target_train.standardizer().clone()
    } else {
        checkpoint.standardizer.clone()
    };
    let train = target_train.restandardized(&standardizer)?;
    let val = target_val.restandardized(&standardizer)?;

    let mut model = checkpoint.model.clone();
    apply_freeze(&mut model, cfg.scope)?;
    let mode = match cfg.scope {
        AdaptScope::Partial => TraceMode::AdaptPartial,
        AdaptScope::Full => TraceMode::AdaptFull,
    };
    let (mut model, trace) = fit(model, &train, &val, &cfg.train_config(), BnMode::Eval, mode)?;
    model.set_all_trainable(true);

    let mut provenance = Provenance::new(target_train.domain_id(), cfg.seed, trace.records.len());
    provenance.source_domain_id = Some(source_id.clone());
    provenance.scope = Some(cfg.scope.to_string());
    let adapted = ModelCheckpoint {
        model,
        standardizer,
        feature_names: checkpoint.feature_names.clone(),
        binning: target_train.binning().clone(),
        provenance,
    };
    Ok((adapted, trace))
}

/// Metrics of `checkpoint` on `data`, with inputs standardized by the
/// checkpoint's stored statistics and labels taken from `data`.
pub fn evaluate_checkpoint(checkpoint: &ModelCheckpoint, data: &LabeledDataset) -> Result<Metrics> {
    check_target(checkpoint, data)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let data = data.restandardized(&checkpoint.standardizer)?;
    let pred = checkpoint.model.predict(data.features())?;
    let metrics = compute_metrics(data.labels(), &pred, checkpoint.binning.n_classes)?;
    Ok(metrics.with_meta(MetricsMeta {
        source: Some(
            checkpoint
                .provenance
                .source_domain_id
                .clone()
                .unwrap_or_else(|| checkpoint.provenance.domain_id.clone()),
        ),
        target: Some(data.domain_id().to_string()),
        arm: None,
        scope: checkpoint.provenance.scope.clone(),
        standardizer_domain: Some(checkpoint.provenance.domain_id.clone()),
    }))
}

/// The "without adaptation" arm: the unmodified source checkpoint applied to
/// target test data.
pub fn evaluate_transfer(checkpoint: &ModelCheckpoint, target_test: &LabeledDataset) -> Result<Metrics> {
    let mut m = evaluate_checkpoint(checkpoint, target_test)?;
    m.meta.arm = Some("no-adapt".into());
    Ok(m)
}
