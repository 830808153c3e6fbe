use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equal-width power classes over `[0, max training power]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub n_classes: usize,
    pub edges: Vec<f64>,
    pub domain_id: String,
}

/// Fits `n_classes` equal-width bins over `[0, max(power)]`.
pub fn fit_bins(power: &[f64], n_classes: usize, domain_id: &str) -> Result<BinningScheme> {
    if n_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {n_classes}")));
    }
    if power.is_empty() {
        return Err(Error::invalid("cannot fit bins on an empty power series"));
    }
    if let Some(bad) = power.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("power values must be finite and >= 0, got {bad}")));
    }
    let max = power.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::invalid("maximum power is 0 (degenerate plant)"));
    }
    let n = n_classes as f64;
    let mut edges: Vec<f64> = (0..n_classes).map(|i| max * i as f64 / n).collect();
    edges.push(max);
    Ok(BinningScheme {
        n_classes,
        edges,
        domain_id: domain_id.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub class: usize,
    /// Power exceeded the top edge and was clamped into the top class.
    pub clamped: bool,
}

impl BinningScheme {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.edges.len() != self.n_classes + 1 {
            return Err(Error::invalid(format!(
                "binning has {} edges for {} classes",
                self.edges.len(),
                self.n_classes
            )));
        }
        if self.edges[0] != 0.0 || self.edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bin edges must start at 0 and strictly ascend"));
        }
        Ok(())
    }

    /// Class `i` with `edges[i] <= power < edges[i+1]`; the top edge itself
    /// and anything above it land in the last class.
    pub fn assign(&self, power: f64) -> Result<Assignment> {
        if power.is_nan() || power < 0.0 {
            return Err(Error::invalid(format!("power must be >= 0, got {power}")));
        }
        let at_or_below = self.edges.partition_point(|&e| e <= power);
        let class = at_or_below.saturating_sub(1).min(self.n_classes - 1);
        Ok(Assignment {
            class,
            clamped: power > self.edges[self.n_classes],
        })
    }

    /// Labels for a whole series plus the number of clamped values.
    pub fn assign_all(&self, power: &[f64]) -> Result<(Vec<usize>, usize)> {
        let mut clamped = 0;
        let labels = power
            .iter()
            .map(|&p| {
                let a = self.assign(p)?;
                clamped += a.clamped as usize;
                Ok(a.class)
            })
            .collect::<Result<Vec<_>>>()?;
        if clamped > 0 {
            log::warn!(
                "{clamped} power values above the top edge {} clamped to class {}",
                self.edges[self.n_classes],
                self.n_classes - 1
            );
        }
        Ok((labels, clamped))
    }
}

pub fn assign_label(power: f64, scheme: &BinningScheme) -> Result<usize> {
    scheme.assign(power).map(|a| a.class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn equal_width_edges() {
        let s = fit_bins(&[0.0, 37.0, 100.0, 12.5], 5, "x").unwrap();
        assert_eq!(s.edges, vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        s.validate().unwrap();
    }

    #[test]
    fn fit_errors() {
        assert!(fit_bins(&[1.0], 1, "x").is_err());
        assert!(fit_bins(&[0.0, 0.0], 5, "x").is_err());
        assert!(fit_bins(&[-1.0, 2.0], 5, "x").is_err());
        assert!(fit_bins(&[], 5, "x").is_err());
    }

    #[test]
    fn boundaries() {
        let s = fit_bins(&[100.0], 5, "x").unwrap();
        assert_eq!(assign_label(0.0, &s).unwrap(), 0);
        assert_eq!(assign_label(20.0, &s).unwrap(), 1);
        assert_eq!(assign_label(100.0, &s).unwrap(), 4);
        let over = s.assign(130.0).unwrap();
        assert_eq!(over, Assignment { class: 4, clamped: true });
        assert!(assign_label(-0.1, &s).is_err());
    }

    fn linear_scan(power: f64, edges: &[f64]) -> usize {
        let n = edges.len() - 1;
        for i in 0..n {
            if edges[i] <= power && power < edges[i + 1] {
                return i;
            }
        }
        n - 1
    }

    #[test]
    fn matches_linear_scan_on_random_powers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let train: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..73.3)).collect();
        let s = fit_bins(&train, 5, "x").unwrap();
        for _ in 0..1000 {
            let p: f64 = rng.random_range(0.0..90.0);
            assert_eq!(assign_label(p, &s).unwrap(), linear_scan(p, &s.edges), "p = {p}");
        }
        for &e in &s.edges {
            assert_eq!(assign_label(e, &s).unwrap(), linear_scan(e, &s.edges));
        }
    }

    #[test]
    fn binning_is_deterministic() {
        let p = [0.1, 3.3, 7.77, 0.0];
        assert_eq!(fit_bins(&p, 5, "a").unwrap(), fit_bins(&p, 5, "a").unwrap());
    }

    proptest::proptest! {
        #[test]
        fn labels_are_monotone(a in 0.0f64..200.0, b in 0.0f64..200.0) {
            let s = fit_bins(&[150.0], 5, "x").unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(assign_label(lo, &s).unwrap() <= assign_label(hi, &s).unwrap());
        }
    }
}
