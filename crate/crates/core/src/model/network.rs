use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::numerics::{argmax_rows, BnMode, BnRunningStats, Parameter, Tape, Tensor, Var};

/// Rows per chunk for inference over whole datasets.
const EVAL_CHUNK: usize = 2048;

/// Conv/BN/FC classifier with its parameters and batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    params: Vec<Parameter>,
    bn: Vec<BnRunningStats>,
}

/// Tape handles for one forward pass.
pub struct ForwardPass {
    pub params: Vec<Var>,
    pub logits: Var,
}

impl Model {
    /// He-uniform weights, zero biases, unit BN scale, zero BN shift.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.starts_with("bn") && name.ends_with(".weight") {
                    vec![1.0; n]
                } else if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                Ok(Parameter::new(name, Tensor::new(&shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let bn = spec
            .conv_blocks
            .iter()
            .map(|b| BnRunningStats::new(b.channels))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            bn,
        })
    }

    /// Reassembles a model from stored parameters; names and shapes must
    /// match the spec exactly.
    pub fn from_parts(
        spec: ArchitectureSpec,
        params: Vec<Parameter>,
        bn: Vec<BnRunningStats>,
    ) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match spec {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        if bn.len() != spec.conv_blocks.len()
            || bn
                .iter()
                .zip(&spec.conv_blocks)
                .any(|(s, b)| s.mean.len() != b.channels || s.var.len() != b.channels)
        {
            return Err(Error::Checkpoint("batch-norm statistics do not match spec".into()));
        }
        Ok(Self { spec, params, bn })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn bn_stats(&self) -> &[BnRunningStats] {
        &self.bn
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Parameter::numel)
            .sum()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = flag);
    }

    /// Records a forward pass of `x: [batch, n_features]` on `tape`.
    ///
    /// `BnMode::Train` updates the running statistics in place.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<ForwardPass> {
        let Self { spec, params, bn } = self;
        Self::record(spec, params, bn, tape, x, mode)
    }

    fn record(
        spec: &ArchitectureSpec,
        params: &[Parameter],
        bn: &mut [BnRunningStats],
        tape: &mut Tape,
        x: &Tensor,
        mode: BnMode,
    ) -> Result<ForwardPass> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != spec.n_features {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: shape.to_vec(),
                right: vec![usize::MAX, spec.n_features],
            });
        }
        let batch = shape[0];
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let input = tape.leaf(x);
        let mut h = tape.reshape(input, &[batch, 1, spec.n_features])?;
        for (i, block) in spec.conv_blocks.iter().enumerate() {
            let base = 4 * i;
            h = tape.conv1d(h, vars[base], vars[base + 1], block.stride, block.padding)?;
            h = tape.batchnorm1d(h, vars[base + 2], vars[base + 3], &mut bn[i], mode)?;
            h = tape.relu(h);
        }
        let base = 4 * spec.conv_blocks.len();
        h = tape.flatten(h)?;
        h = tape.dense(h, vars[base], vars[base + 1])?;
        h = tape.relu(h);
        let logits = tape.dense(h, vars[base + 2], vars[base + 3])?;
        Ok(ForwardPass {
            params: vars,
            logits,
        })
    }

    /// Eval-mode logits for a row-major `[n, n_features]` matrix.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let k = self.spec.n_features;
        if features.len() % k != 0 {
            return Err(Error::invalid("feature matrix width does not match the model"));
        }
        let mut bn = self.bn.clone();
        let mut out = Vec::with_capacity(features.len() / k * self.spec.n_classes);
        for chunk in features.chunks(EVAL_CHUNK * k) {
            let x = Tensor::new(&[chunk.len() / k, k], chunk.to_vec())?;
            let mut tape = Tape::new();
            let pass = Self::record(&self.spec, &self.params, &mut bn, &mut tape, &x, BnMode::Eval)?;
            out.extend_from_slice(tape.value(pass.logits));
        }
        Ok(out)
    }

    /// Eval-mode class predictions (argmax of the logits).
    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?, self.spec.n_classes))
    }

    /// Adds tape gradients into the parameters' gradient slots.
    pub fn accumulate_grads(
        &mut self,
        grads: &crate::numerics::Gradients,
        pass: &ForwardPass,
    ) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn random_input(rows: usize, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * k).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let a = Model::build(&spec, 7).unwrap();
        let b = Model::build(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::build(&spec, 8).unwrap());
        assert_eq!(a.parameter_count(), 14_405);
    }

    #[test]
    fn output_width_is_class_count() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let m = Model::build(&spec, 1).unwrap();
        let logits = m.logits(&random_input(3, 6, 2)).unwrap();
        assert_eq!(logits.len(), 15);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_rows_are_batch_independent() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let m = Model::build(&spec, 3).unwrap();
        let x = random_input(8, 6, 4);
        let batch = m.logits(&x).unwrap();
        for r in 0..8 {
            let single = m.logits(&x[r * 6..(r + 1) * 6]).unwrap();
            for c in 0..5 {
                assert!((single[c] - batch[r * 5 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let mut m = Model::build(&spec, 3).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("fc2") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let logits = m.logits(&random_input(2, 6, 5)).unwrap();
        let p = softmax(&Tensor::new(&[2, 5], logits).unwrap()).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn width_mismatch_rejected() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let mut m = Model::build(&spec, 3).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 5]);
        assert!(m.forward(&mut tape, &x, BnMode::Eval).is_err());
    }

    /// Straight-line forward pass over plain slices, independent of the tape.
    fn reference_forward(m: &Model, row: &[f64]) -> Vec<f64> {
        let spec = m.spec();
        let get = |n: &str| m.param(n).unwrap().tensor.data().to_vec();
        let mut channels: Vec<Vec<f64>> = vec![row.to_vec()];
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let k = get(&format!("conv{i}.weight"));
            let bias = get(&format!("conv{i}.bias"));
            let gamma = get(&format!("bn{i}.weight"));
            let beta = get(&format!("bn{i}.bias"));
            let stats = &m.bn_stats()[i];
            let len = channels[0].len();
            let out_len = (len + 2 * b.padding - b.kernel) / b.stride + 1;
            let c_in = channels.len();
            let mut next = vec![vec![0.0; out_len]; b.channels];
            for co in 0..b.channels {
                for t in 0..out_len {
                    let mut acc = bias[co];
                    for (ci, ch) in channels.iter().enumerate() {
                        for j in 0..b.kernel {
                            let pos = (t * b.stride + j) as isize - b.padding as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += k[(co * c_in + ci) * b.kernel + j] * ch[pos as usize];
                            }
                        }
                    }
                    let z = (acc - stats.mean[co]) / (stats.var[co] + stats.eps).sqrt();
                    next[co][t] = (gamma[co] * z + beta[co]).max(0.0);
                }
            }
            channels = next;
        }
        let flat: Vec<f64> = channels.concat();
        let dense = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bo)| bo + x.iter().enumerate().map(|(i, xi)| xi * w[o * x.len() + i]).sum::<f64>())
                .collect()
        };
        let hidden: Vec<f64> = dense(&flat, &get("fc1.weight"), &get("fc1.bias"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        dense(&hidden, &get("fc2.weight"), &get("fc2.bias"))
    }

    #[test]
    fn matches_straight_line_reference() {
        let spec = ArchitectureSpec::default_for(6, 5);
        let mut m = Model::build(&spec, 21).unwrap();
        // move the BN statistics away from their initial values
        let mut tape = Tape::new();
        let warm = Tensor::new(&[16, 6], random_input(16, 6, 9)).unwrap();
        m.forward(&mut tape, &warm, BnMode::Train).unwrap();

        let x = random_input(50, 6, 22);
        let logits = m.logits(&x).unwrap();
        let preds = m.predict(&x).unwrap();
        for r in 0..50 {
            let reference = reference_forward(&m, &x[r * 6..(r + 1) * 6]);
            for c in 0..5 {
                assert!((reference[c] - logits[r * 5 + c]).abs() < 1e-9);
            }
            let arg = argmax_rows(&reference, 5)[0];
            assert_eq!(arg, preds[r]);
        }
    }
}
