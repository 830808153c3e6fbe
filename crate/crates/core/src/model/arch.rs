use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Conv/BN trunk followed by exactly two fully connected layers.
///
/// The input row of `n_features` standardized values is read as a
/// one-channel sequence of length `n_features`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub n_features: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_hidden: usize,
    pub n_classes: usize,
    pub activation: Activation,
}

impl ArchitectureSpec {
    /// Conv(16,k3,p1)+BN+ReLU → Conv(32,k3,p1)+BN+ReLU → FC(hidden 64) → FC(n_classes).
    pub fn default_for(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            conv_blocks: vec![
                ConvBlock {
                    channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                ConvBlock {
                    channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ],
            fc_hidden: 64,
            n_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::invalid("architecture needs at least one feature"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("architecture needs at least two classes"));
        }
        if self.fc_hidden == 0 {
            return Err(Error::invalid("fc_hidden must be positive"));
        }
        let mut len = self.n_features;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::invalid(format!("conv block {i} has a zero dimension")));
            }
            if len + 2 * b.padding < b.kernel {
                return Err(Error::invalid(format!(
                    "conv block {i}: kernel {} wider than padded length {}",
                    b.kernel,
                    len + 2 * b.padding
                )));
            }
            len = (len + 2 * b.padding - b.kernel) / b.stride + 1;
        }
        Ok(())
    }

    /// Channels and sequence length reaching the flatten step.
    pub fn trunk_output(&self) -> (usize, usize) {
        let mut channels = 1;
        let mut len = self.n_features;
        for b in &self.conv_blocks {
            channels = b.channels;
            len = (len + 2 * b.padding - b.kernel) / b.stride + 1;
        }
        (channels, len)
    }

    pub fn flatten_width(&self) -> usize {
        let (c, l) = self.trunk_output();
        c * l
    }

    /// Parameter names and shapes in model order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![b.channels, c_in, b.kernel]));
            out.push((format!("conv{i}.bias"), vec![b.channels]));
            out.push((format!("bn{i}.weight"), vec![b.channels]));
            out.push((format!("bn{i}.bias"), vec![b.channels]));
            c_in = b.channels;
        }
        let flat = self.flatten_width();
        out.push(("fc1.weight".into(), vec![self.fc_hidden, flat]));
        out.push(("fc1.bias".into(), vec![self.fc_hidden]));
        out.push(("fc2.weight".into(), vec![self.n_classes, self.fc_hidden]));
        out.push(("fc2.bias".into(), vec![self.n_classes]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Names of the final two fully connected layers' weights and biases.
    pub fn head_parameter_names() -> [&'static str; 4] {
        ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    }
}
