//! Random-forest feature ranking and top-k selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_random_forest, ForestParams, Matrix};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    pub importances: Vec<f64>,
    pub n_trees: usize,
    pub seed: u64,
}

/// Mean-decrease-in-impurity importances from a Gini random forest trained
/// on every column of `train`.
pub fn fit_importance(train: &LabeledDataset, n_trees: usize, seed: u64) -> Result<ImportanceReport> {
    if train.is_empty() {
        return Err(Error::invalid("cannot rank features on an empty dataset"));
    }
    if n_trees < 1 {
        return Err(Error::invalid("n_trees must be at least 1"));
    }
    let first = train.labels()[0];
    if train.labels().iter().all(|&l| l == first) {
        return Err(Error::invalid("training labels contain a single class"));
    }
    let params = ForestParams {
        n_trees,
        ..ForestParams::default()
    };
    let x = Matrix::new(train.features(), train.n_features())?;
    let forest = fit_random_forest(x, train.labels(), train.n_classes(), &params, seed)?;
    Ok(ImportanceReport {
        features: train.feature_names().to_vec(),
        importances: forest.feature_importances(),
        n_trees,
        seed,
    })
}

/// Top `k` features by importance, ties going to the earlier column; the
/// result keeps ranking order.
pub fn select_features(report: &ImportanceReport, k: usize) -> Result<Vec<String>> {
    let n = report.features.len();
    if k < 1 || k > n {
        return Err(Error::invalid(format!("k must lie in [1, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        report.importances[b]
            .total_cmp(&report.importances[a])
            .then(a.cmp(&b))
    });
    Ok(order[..k].iter().map(|&i| report.features[i].clone()).collect())
}

impl ImportanceReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::baselines::EnsembleModel;
    use crate::data::{BinningScheme, SplitTag, Standardizer};

    fn dataset(x: Vec<f64>, y: Vec<usize>, k: usize) -> LabeledDataset {
        LabeledDataset::new(
            x,
            y,
            (0..k).map(|i| format!("c{i}")).collect(),
            BinningScheme {
                n_classes: 3,
                edges: vec![0.0, 1.0, 2.0, 3.0],
                domain_id: "t".into(),
            },
            Standardizer::identity(k),
            SplitTag::Train,
            "t",
        )
        .unwrap()
    }

    /// Label = threshold on column 0; other columns pure noise.
    fn threshold_data(n: usize, k: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n).map(|i| usize::from(x[i * k] > 0.2)).collect();
        dataset(x, y, k)
    }

    fn accuracy(m: &EnsembleModel, x: &[f64], k: usize, y: &[usize]) -> f64 {
        let p = m.predict(Matrix::new(x, k).unwrap()).unwrap();
        p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }

    /// Accuracy drop when each column is shuffled on held-out data.
    fn permutation_importance(m: &EnsembleModel, data: &LabeledDataset, seed: u64) -> Vec<f64> {
        let k = data.n_features();
        let base = accuracy(m, data.features(), k, data.labels());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|f| {
                let mut col: Vec<f64> = (0..data.len()).map(|i| data.row(i)[f]).collect();
                col.shuffle(&mut rng);
                let mut x = data.features().to_vec();
                for (i, v) in col.into_iter().enumerate() {
                    x[i * k + f] = v;
                }
                base - accuracy(m, &x, k, data.labels())
            })
            .collect()
    }

    #[test]
    fn informative_column_dominates() {
        let train = threshold_data(500, 6, 1);
        let report = fit_importance(&train, 50, 3).unwrap();
        assert!(report.importances[0] > 0.8, "{:?}", report.importances);
        assert!((report.importances.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(report.importances.iter().all(|&v| v >= 0.0));

        let params = ForestParams {
            n_trees: 50,
            ..ForestParams::default()
        };
        let forest = fit_random_forest(
            Matrix::new(train.features(), 6).unwrap(),
            train.labels(),
            3,
            &params,
            3,
        )
        .unwrap();
        let perm = permutation_importance(&forest, &threshold_data(500, 6, 2), 4);
        let top = (0..6).max_by(|&a, &b| perm[a].total_cmp(&perm[b])).unwrap();
        assert_eq!(top, 0, "{perm:?}");
    }

    #[test]
    fn duplicated_column_shares_importance() {
        let base = threshold_data(500, 4, 5);
        let single = fit_importance(&base, 50, 1).unwrap().importances[0];
        let mut x = Vec::with_capacity(500 * 5);
        for i in 0..500 {
            x.extend_from_slice(base.row(i));
            x.push(base.row(i)[0]);
        }
        let dup = fit_importance(&dataset(x, base.labels().to_vec(), 5), 50, 1).unwrap();
        let pair = dup.importances[0] + dup.importances[4];
        assert!((pair - single).abs() < 0.1, "{pair} vs {single}");
    }

    #[test]
    fn pure_noise_spreads_importance() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let k = 6;
            let x: Vec<f64> = (0..300 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = (0..300).map(|_| rng.random_range(0..3)).collect();
            let r = fit_importance(&dataset(x, y, k), 30, seed).unwrap();
            let max = r.importances.iter().cloned().fold(0.0, f64::max);
            assert!(max < 3.0 / k as f64, "seed {seed}: {:?}", r.importances);
        }
    }

    #[test]
    fn reproducible_and_validated() {
        let train = threshold_data(200, 3, 9);
        assert_eq!(fit_importance(&train, 10, 2).unwrap(), fit_importance(&train, 10, 2).unwrap());
        let flat = dataset(vec![0.0; 30], vec![1; 10], 3);
        assert!(fit_importance(&flat, 10, 0).is_err());
        assert!(fit_importance(&train, 0, 0).is_err());
    }

    #[test]
    fn selection_rules() {
        let report = ImportanceReport {
            features: ["a", "b", "c", "d"].map(String::from).to_vec(),
            importances: vec![0.2, 0.4, 0.2, 0.2],
            n_trees: 1,
            seed: 0,
        };
        assert_eq!(select_features(&report, 2).unwrap(), vec!["b", "a"]);
        assert_eq!(select_features(&report, 3).unwrap(), vec!["b", "a", "c"]);
        assert_eq!(select_features(&report, 4).unwrap().len(), 4);
        assert!(select_features(&report, 0).is_err());
        assert!(select_features(&report, 5).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let report = fit_importance(&threshold_data(100, 3, 1), 5, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("importance.json");
        report.save(&path).unwrap();
        assert_eq!(ImportanceReport::load(&path).unwrap(), report);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(v.get("features").is_some() && v.get("importances").is_some());
    }
}
