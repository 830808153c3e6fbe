use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, DecisionTree, Matrix, MaxFeatures, TreeParams, TreeTarget};
use crate::error::{Error, Result};
use crate::numerics::{argmax_rows, softmax_in_place};

pub const ENSEMBLE_EXTENSION: &str = "hsens";

/// Floor on class priors so an absent class has a finite initial score.
const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Rf,
    Adaboost,
    Gbm,
}

impl fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rf => "rf",
            Self::Adaboost => "adaboost",
            Self::Gbm => "gbm",
        })
    }
}

impl FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf" => Ok(Self::Rf),
            "adaboost" => Ok(Self::Adaboost),
            "gbm" => Ok(Self::Gbm),
            other => Err(Error::invalid(format!("unknown baseline {other:?} (rf|adaboost|gbm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub kind: EnsembleKind,
    pub n_classes: usize,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    /// AdaBoost round weights; empty for the other kinds.
    pub tree_weights: Vec<f64>,
    /// Boosting shrinkage (GBM only).
    pub learning_rate: Option<f64>,
    /// Initial per-class scores (GBM) or fallback class prior (AdaBoost).
    pub init: Vec<f64>,
    /// Training error (AdaBoost) or mean deviance (GBM) after each round.
    pub staged_train_loss: Vec<f64>,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
}

fn check_xy(x: Matrix<'_>, y: &[usize], n_classes: usize) -> Result<()> {
    if x.n_rows() == 0 {
        return Err(Error::invalid("cannot fit on zero rows"));
    }
    if y.len() != x.n_rows() {
        return Err(Error::invalid(format!("{} labels for {} rows", y.len(), x.n_rows())));
    }
    if n_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if let Some(l) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    Ok(())
}

fn class_prior(y: &[usize], weights: Option<&[f64]>, n_classes: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_classes];
    for (i, &l) in y.iter().enumerate() {
        p[l] += weights.map_or(1.0, |w| w[i]);
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Bagged trees with per-node feature subsampling. Tree `t` draws from a
/// ChaCha8 stream derived from `(seed, t)`, so results do not depend on the
/// thread count.
pub fn fit_random_forest(
    x: Matrix<'_>,
    y: &[usize],
    n_classes: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<EnsembleModel> {
    check_xy(x, y, n_classes)?;
    if params.n_trees < 1 {
        return Err(Error::invalid("n_trees must be at least 1"));
    }
    let n = x.n_rows();
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
        max_features: params.max_features,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut weights = vec![0.0; n];
            if params.bootstrap {
                for _ in 0..n {
                    weights[rng.random_range(0..n)] += 1.0;
                }
            } else {
                weights.fill(1.0);
            }
            fit_tree(
                x,
                TreeTarget::Classes {
                    labels: y,
                    n_classes,
                },
                &weights,
                &tree_params,
                Some(&mut rng),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        kind: EnsembleKind::Rf,
        n_classes,
        n_features: x.n_features(),
        trees,
        tree_weights: Vec::new(),
        learning_rate: None,
        init: class_prior(y, None, n_classes),
        staged_train_loss: Vec::new(),
        seed,
        hyperparameters: serde_json::to_value(params)?,
    })
}

/// Multiclass SAMME with depth-1 stumps.
pub fn fit_adaboost(
    x: Matrix<'_>,
    y: &[usize],
    n_classes: usize,
    n_rounds: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    check_xy(x, y, n_classes)?;
    if n_rounds < 1 {
        return Err(Error::invalid("n_rounds must be at least 1"));
    }
    let n = x.n_rows();
    let k = n_classes as f64;
    let stump = TreeParams {
        max_depth: Some(1),
        ..TreeParams::default()
    };
    let mut w = vec![1.0 / n as f64; n];
    let mut model = EnsembleModel {
        kind: EnsembleKind::Adaboost,
        n_classes,
        n_features: x.n_features(),
        trees: Vec::new(),
        tree_weights: Vec::new(),
        learning_rate: None,
        init: class_prior(y, None, n_classes),
        staged_train_loss: Vec::new(),
        seed,
        hyperparameters: serde_json::json!({ "n_rounds": n_rounds, "max_depth": 1 }),
    };
    let mut votes = vec![0.0; n * n_classes];
    for _ in 0..n_rounds {
        let tree = fit_tree(
            x,
            TreeTarget::Classes {
                labels: y,
                n_classes,
            },
            &w,
            &stump,
            None,
        )?;
        let pred: Vec<usize> = (0..n)
            .map(|i| argmax_rows(tree.predict_row(x.row(i)), n_classes)[0])
            .collect();
        let total: f64 = w.iter().sum();
        let err = (0..n).filter(|&i| pred[i] != y[i]).map(|i| w[i]).sum::<f64>() / total;
        if err >= 1.0 - 1.0 / k {
            log::debug!("adaboost: stump error {err:.4} is no better than chance, stopping");
            break;
        }
        let alpha = if err <= 0.0 {
            1.0
        } else {
            ((1.0 - err) / err).ln() + (k - 1.0).ln()
        };
        for (i, &p) in pred.iter().enumerate() {
            votes[i * n_classes + p] += alpha;
        }
        model.trees.push(tree);
        model.tree_weights.push(alpha);
        let wrong = argmax_rows(&votes, n_classes)
            .iter()
            .zip(y)
            .filter(|(p, t)| p != t)
            .count();
        model.staged_train_loss.push(wrong as f64 / n as f64);
        if err <= 0.0 {
            break;
        }
        for (i, wi) in w.iter_mut().enumerate() {
            if pred[i] != y[i] {
                *wi *= alpha.exp();
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Ok(model)
}

fn mean_deviance(scores: &[f64], y: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &l) in scores.chunks(n_classes).zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / y.len() as f64
}

/// Multinomial-deviance gradient boosting: each round fits one regression
/// tree per class to the residuals `onehot - softmax(scores)` and sets each
/// leaf to a one-step Newton estimate.
pub fn fit_gradient_boosting(
    x: Matrix<'_>,
    y: &[usize],
    n_classes: usize,
    n_rounds: usize,
    learning_rate: f64,
    max_depth: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    check_xy(x, y, n_classes)?;
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {learning_rate}")));
    }
    let n = x.n_rows();
    let k = n_classes as f64;
    let init: Vec<f64> = class_prior(y, None, n_classes)
        .into_iter()
        .map(|p| p.max(PRIOR_FLOOR).ln())
        .collect();
    let mut scores: Vec<f64> = (0..n).flat_map(|_| init.iter().copied()).collect();
    let params = TreeParams {
        max_depth: Some(max_depth),
        ..TreeParams::default()
    };
    let ones = vec![1.0; n];
    let mut model = EnsembleModel {
        kind: EnsembleKind::Gbm,
        n_classes,
        n_features: x.n_features(),
        trees: Vec::new(),
        tree_weights: Vec::new(),
        learning_rate: Some(learning_rate),
        init,
        staged_train_loss: Vec::new(),
        seed,
        hyperparameters: serde_json::json!({
            "n_rounds": n_rounds,
            "learning_rate": learning_rate,
            "max_depth": max_depth,
        }),
    };
    if learning_rate == 0.0 {
        return Ok(model);
    }
    let mut probs = vec![0.0; n * n_classes];
    let mut residual = vec![0.0; n];
    for _ in 0..n_rounds {
        probs.copy_from_slice(&scores);
        for row in probs.chunks_mut(n_classes) {
            softmax_in_place(row);
        }
        let mut round = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            for i in 0..n {
                residual[i] = f64::from(u8::from(y[i] == c)) - probs[i * n_classes + c];
            }
            let mut tree = fit_tree(x, TreeTarget::Values(&residual), &ones, &params, None)?;
            let leaves: Vec<usize> = (0..n).map(|i| tree.leaf_index(x.row(i))).collect();
            let mut num = vec![0.0; tree.nodes.len()];
            let mut den = vec![0.0; tree.nodes.len()];
            for (i, &leaf) in leaves.iter().enumerate() {
                let r = residual[i];
                num[leaf] += r;
                den[leaf] += r.abs() * (1.0 - r.abs());
            }
            for leaf in 0..tree.nodes.len() {
                let gamma = if den[leaf] < 1e-12 {
                    0.0
                } else {
                    (k - 1.0) / k * num[leaf] / den[leaf]
                };
                tree.set_leaf_value(leaf, vec![gamma]);
            }
            round.push((tree, leaves));
        }
        for (c, (tree, leaves)) in round.into_iter().enumerate() {
            for (i, &leaf) in leaves.iter().enumerate() {
                if let super::tree::Node::Leaf { value } = &tree.nodes[leaf] {
                    scores[i * n_classes + c] += learning_rate * value[0];
                }
            }
            model.trees.push(tree);
        }
        model.staged_train_loss.push(mean_deviance(&scores, y, n_classes));
    }
    Ok(model)
}

impl EnsembleModel {
    /// Row-major `[n, n_classes]` class probabilities.
    pub fn predict_proba(&self, x: Matrix<'_>) -> Result<Vec<f64>> {
        if x.n_features() != self.n_features {
            return Err(Error::invalid(format!(
                "ensemble expects {} features, got {}",
                self.n_features,
                x.n_features()
            )));
        }
        let k = self.n_classes;
        let mut out = Vec::with_capacity(x.n_rows() * k);
        for i in 0..x.n_rows() {
            let row = x.row(i);
            let mut p = vec![0.0; k];
            match self.kind {
                EnsembleKind::Rf => {
                    for t in &self.trees {
                        p.iter_mut().zip(t.predict_row(row)).for_each(|(a, b)| *a += b);
                    }
                    p.iter_mut().for_each(|v| *v /= self.trees.len() as f64);
                }
                EnsembleKind::Adaboost => {
                    if self.trees.is_empty() {
                        p.copy_from_slice(&self.init);
                    } else {
                        for (t, a) in self.trees.iter().zip(&self.tree_weights) {
                            p[argmax_rows(t.predict_row(row), k)[0]] += a;
                        }
                        let total: f64 = p.iter().sum();
                        p.iter_mut().for_each(|v| *v /= total);
                    }
                }
                EnsembleKind::Gbm => {
                    p.copy_from_slice(&self.init);
                    let nu = self.learning_rate.unwrap_or(0.0);
                    for (j, t) in self.trees.iter().enumerate() {
                        p[j % k] += nu * t.predict_row(row)[0];
                    }
                    softmax_in_place(&mut p);
                }
            }
            out.extend_from_slice(&p);
        }
        Ok(out)
    }

    pub fn predict(&self, x: Matrix<'_>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?, self.n_classes))
    }

    /// Mean of per-tree normalized impurity decreases, renormalized.
    pub fn feature_importances(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for t in &self.trees {
            imp.iter_mut()
                .zip(t.feature_importances())
                .for_each(|(a, b)| *a += b);
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
