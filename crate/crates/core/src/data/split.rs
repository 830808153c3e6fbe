use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid(format!("split ratios must be positive: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    /// Segment sizes by largest remainder, so each differs from its exact
    /// share by less than one row. Remainder ties go to the earlier segment.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let exact = [self.train, self.val, self.test].map(|r| r * n as f64);
        let mut sizes = exact.map(|e| e.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = n - sizes.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        if sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "split of {n} rows leaves an empty part: {sizes:?}"
            )));
        }
        Ok(sizes)
    }

    /// Contiguous chronological `(train, val, test)` index ranges.
    pub fn ranges(&self, n: usize) -> Result<[std::ops::Range<usize>; 3]> {
        let [a, b, c] = self.sizes(n)?;
        Ok([0..a, a..a + b, a + b..a + b + c])
    }
}

/// Splits a slice into chronological train/val/test parts.
pub fn split_chronological<T: Clone>(
    rows: &[T],
    ratios: &SplitRatios,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [a, b, c] = ratios.ranges(rows.len())?;
    Ok((rows[a].to_vec(), rows[b].to_vec(), rows[c].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_ratios() {
        assert_eq!(SplitRatios::default().sizes(100).unwrap(), [70, 15, 15]);
        let r = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        assert_eq!(r.sizes(10).unwrap(), [8, 1, 1]);
    }

    #[test]
    fn invalid_ratios() {
        let r = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(r.sizes(10).is_err());
        assert!(SplitRatios::default().sizes(2).is_err());
        let neg = SplitRatios {
            train: 1.1,
            val: -0.05,
            test: -0.05,
        };
        assert!(neg.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn splits_partition_in_order(n in 3usize..2000, t in 0.1f64..0.8, v in 0.05f64..0.15) {
            let ratios = SplitRatios { train: t, val: v, test: 1.0 - t - v };
            if let Ok(sizes) = ratios.sizes(n) {
                let exact = [t, v, 1.0 - t - v];
                for (s, r) in sizes.iter().zip(exact) {
                    proptest::prop_assert!((*s as f64 - r * n as f64).abs() < 1.0);
                }
                let rows: Vec<usize> = (0..n).collect();
                let (a, b, c) = split_chronological(&rows, &ratios).unwrap();
                let joined: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
                proptest::prop_assert_eq!(joined, rows);
            }
        }
    }
}
