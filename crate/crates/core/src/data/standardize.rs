use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on a row-major `[n, n_features]` matrix. Returns the indices of
    /// columns whose stddev had to be floored.
    pub fn fit(data: &[f64], n_features: usize) -> Result<(Self, Vec<usize>)> {
        if n_features == 0 || data.is_empty() || data.len() % n_features != 0 {
            return Err(Error::invalid(format!(
                "cannot fit standardizer on {} values with {n_features} features",
                data.len()
            )));
        }
        let n = (data.len() / n_features) as f64;
        let mut mean = vec![0.0; n_features];
        for row in data.chunks(n_features) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; n_features];
        for row in data.chunks(n_features) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    floored.push(j);
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        if !floored.is_empty() {
            log::warn!("standardizer: constant columns {floored:?} floored at {STD_FLOOR}");
        }
        Ok((Self { mean, std }, floored))
    }

    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        let k = self.n_features();
        data.chunks(k)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect()
    }

    pub fn invert(&self, data: &[f64]) -> Vec<f64> {
        let k = self.n_features();
        data.chunks(k)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| v * s + m)
            })
            .collect()
    }

    pub fn subset(&self, columns: &[usize]) -> Self {
        Self {
            mean: columns.iter().map(|&c| self.mean[c]).collect(),
            std: columns.iter().map(|&c| self.std[c]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_column() {
        let (s, floored) = Standardizer::fit(&[1.0, 2.0, 3.0], 1).unwrap();
        assert!(floored.is_empty());
        assert_eq!(s.mean, vec![2.0]);
        let reference = ((1.0f64 + 0.0 + 1.0) / 3.0).sqrt();
        assert!((s.std[0] - reference).abs() < 1e-15);
        let z = s.apply(&[1.0, 2.0, 3.0]);
        assert_eq!(z[1], 0.0);
        assert!((z[0] + z[2]).abs() < 1e-15);
    }

    #[test]
    fn constant_column_floored() {
        let (s, floored) = Standardizer::fit(&[5.0, 1.0, 5.0, 2.0], 2).unwrap();
        assert_eq!(floored, vec![0]);
        assert_eq!(s.std[0], STD_FLOOR);
    }

    #[test]
    fn train_columns_centered_and_scaled() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 * 0.37 - 4.0).collect();
        let (s, _) = Standardizer::fit(&data, 3).unwrap();
        let z = s.apply(&data);
        for j in 0..3 {
            let col: Vec<f64> = z.iter().skip(j).step_by(3).cloned().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-6);
            assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip(data in proptest::collection::vec(-1e3f64..1e3, 4..64)) {
            let n = data.len() / 2 * 2;
            let (s, _) = Standardizer::fit(&data[..n], 2).unwrap();
            let back = s.invert(&s.apply(&data[..n]));
            for (a, b) in back.iter().zip(&data[..n]) {
                proptest::prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
