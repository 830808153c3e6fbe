use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to `p̂[label]` before taking the log.
pub const PROB_FLOOR: f64 = 1e-15;

/// Row-wise softmax of a `[batch, classes]` logit tensor.
///
/// The row maximum is subtracted before exponentiating, so any finite input
/// is safe.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let classes = shape[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(classes.max(1)) {
        softmax_in_place(row);
    }
    Tensor::new(shape, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean of `−ln p̂[label]` over the batch.
    pub loss: f64,
    /// Rows whose `p̂[label]` had to be floored at [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean cross-entropy of row-normalized probabilities against class labels.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = shape[1];
    let mut total = 0.0;
    let mut clamped = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probability row {r} sums to {s}")));
        }
        let mut p = row[label];
        if p <= 0.0 {
            p = PROB_FLOOR;
            clamped += 1;
        }
        total -= p.ln();
    }
    if clamped > 0 {
        log::warn!("cross_entropy: {clamped} probabilities clamped at {PROB_FLOOR}");
    }
    Ok(CrossEntropy {
        loss: total / labels.len() as f64,
        clamped,
    })
}

/// Index of the largest entry of each row (first one wins on ties).
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let classes = rows[0].len();
        Tensor::new(&[rows.len(), classes], rows.concat()).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform() {
        let p = softmax(&logits(&[&[0.3; 5]])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn one_hot_logit_matches_closed_form() {
        let p = softmax(&logits(&[&[1.0, 0.0, 0.0, 0.0, 0.0]])).unwrap();
        let e = std::f64::consts::E;
        let denom = e + 4.0;
        assert!((p.data()[0] - e / denom).abs() < 1e-12);
        for &v in &p.data()[1..] {
            assert!((v - 1.0 / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_logits_rejected() {
        assert!(matches!(
            softmax(&logits(&[&[0.0, f64::NAN]])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let certain = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&certain, &[1]).unwrap().loss, 0.0);

        let uniform = Tensor::filled(&[1, 5], 0.2);
        let ce = cross_entropy(&uniform, &[3]).unwrap();
        assert!((ce.loss - 5f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 1.60944).abs() < 1e-5);

        let two = Tensor::new(&[2, 2], vec![0.25, 0.75, 0.9, 0.1]).unwrap();
        let a = cross_entropy(&Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap(), &[0]).unwrap();
        let b = cross_entropy(&Tensor::new(&[1, 2], vec![0.9, 0.1]).unwrap(), &[0]).unwrap();
        let both = cross_entropy(&two, &[0, 0]).unwrap();
        assert!((both.loss - (a.loss + b.loss) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let p = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let ce = cross_entropy(&p, &[0]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.loss + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_on_tie() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}
