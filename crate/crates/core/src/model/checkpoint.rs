//! Versioned binary checkpoint container (`.hsckpt`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HSCKPT"  u32 header_len  header JSON  f64 payload ...  u32 CRC32
//! ```
//!
//! The header carries the architecture, tensor names/shapes, batch-norm
//! settings, the input standardizer, feature names, bin edges and
//! provenance. The payload holds every parameter tensor in spec order
//! followed by each batch-norm layer's running mean and variance. The CRC
//! covers every byte before it.
//!
//! The header schema is a closed whitelist: nothing in it may grow with the
//! number of training samples, so a checkpoint cannot smuggle source data.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::arch::ArchitectureSpec;
use super::network::Model;
use crate::data::{BinningScheme, Standardizer};
use crate::error::{Error, Result};
use crate::numerics::{BnRunningStats, Parameter, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";
pub const CHECKPOINT_EXTENSION: &str = "hsckpt";
const MAGIC: &[u8; 6] = b"HSCKPT";

/// Top-level header keys; anything else is rejected.
pub const HEADER_FIELDS: [&str; 8] = [
    "format_version",
    "spec",
    "tensors",
    "batch_norm",
    "standardizer",
    "feature_names",
    "binning",
    "provenance",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub domain_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub format_version: String,
    /// Set on adapted checkpoints: the domain the weights were pretrained on.
    #[serde(default)]
    pub source_domain_id: Option<String>,
    /// `partial` or `full` for adapted checkpoints.
    #[serde(default)]
    pub scope: Option<String>,
    pub init: String,
}

impl Provenance {
    pub fn new(domain_id: impl Into<String>, seed: u64, epochs: usize) -> Self {
        Self {
            domain_id: domain_id.into(),
            seed,
            epochs,
            format_version: CHECKPOINT_FORMAT_VERSION.into(),
            source_domain_id: None,
            scope: None,
            init: "he-uniform".into(),
        }
    }
}

/// Everything that crosses from the source side to the target side.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub standardizer: Standardizer,
    pub feature_names: Vec<String>,
    pub binning: BinningScheme,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnEntry {
    channels: usize,
    momentum: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: String,
    spec: ArchitectureSpec,
    tensors: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
    standardizer: Standardizer,
    feature_names: Vec<String>,
    binning: BinningScheme,
    provenance: Provenance,
}

/// Checks a parsed header against the whitelist and the size bounds implied
/// by its own architecture.
pub fn validate_header(header: &Value) -> Result<()> {
    let obj = header
        .as_object()
        .ok_or_else(|| Error::Checkpoint("header is not a JSON object".into()))?;
    let allowed: BTreeSet<&str> = HEADER_FIELDS.into_iter().collect();
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(k.as_str())) {
        return Err(Error::SourceFree(format!(
            "checkpoint header field {extra:?} is not part of the schema"
        )));
    }
    if let Some(missing) = HEADER_FIELDS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(Error::Checkpoint(format!("header is missing {missing:?}")));
    }
    let parsed: Header = serde_json::from_value(header.clone())
        .map_err(|e| Error::SourceFree(format!("header does not match schema: {e}")))?;
    parsed.check_bounds()
}

impl Header {
    fn check_bounds(&self) -> Result<()> {
        let spec = &self.spec;
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if self.tensors.len() != expected.len()
            || self
                .tensors
                .iter()
                .zip(&expected)
                .any(|(t, (n, s))| t.name != *n || t.shape != *s)
        {
            return Err(Error::Checkpoint("tensor table does not match architecture".into()));
        }
        if self.batch_norm.len() != spec.conv_blocks.len()
            || self
                .batch_norm
                .iter()
                .zip(&spec.conv_blocks)
                .any(|(b, c)| b.channels != c.channels)
        {
            return Err(Error::Checkpoint("batch-norm table does not match architecture".into()));
        }
        let k = spec.n_features;
        if self.feature_names.len() != k
            || self.standardizer.mean.len() != k
            || self.standardizer.std.len() != k
        {
            return Err(Error::SourceFree(format!(
                "feature metadata must have exactly {k} entries"
            )));
        }
        if self.binning.n_classes != spec.n_classes {
            return Err(Error::Checkpoint("binning class count differs from architecture".into()));
        }
        self.binning.validate()?;
        Ok(())
    }

    fn payload_len(&self) -> usize {
        let params: usize = self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let bn: usize = self.batch_norm.iter().map(|b| 2 * b.channels).sum();
        params + bn
    }
}

impl ModelCheckpoint {
    pub fn spec(&self) -> &ArchitectureSpec {
        self.model.spec()
    }

    fn header(&self) -> Header {
        Header {
            format_version: CHECKPOINT_FORMAT_VERSION.into(),
            spec: self.model.spec().clone(),
            tensors: self
                .model
                .params()
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            batch_norm: self
                .model
                .bn_stats()
                .iter()
                .map(|b| BnEntry {
                    channels: b.mean.len(),
                    momentum: b.momentum,
                    eps: b.eps,
                })
                .collect(),
            standardizer: self.standardizer.clone(),
            feature_names: self.feature_names.clone(),
            binning: self.binning.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The header as generic JSON, as written to disk.
    pub fn header_json(&self) -> Result<Value> {
        Ok(serde_json::to_value(self.header())?)
    }

    pub fn validate(&self) -> Result<()> {
        validate_header(&self.header_json()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(header.len() + 8 * self.model.parameter_count() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.model.params() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in self.model.bn_stats() {
            for v in b.mean.iter().chain(&b.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checksum {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len_at = MAGIC.len();
        let header_len =
            u32::from_le_bytes(body[len_at..len_at + 4].try_into().expect("4 bytes")) as usize;
        let header_start = len_at + 4;
        let header_end = header_start
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
        let value: Value = serde_json::from_slice(&body[header_start..header_end])?;
        let version = value
            .get("format_version")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string();
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION.into(),
            });
        }
        validate_header(&value)?;
        let header: Header = serde_json::from_value(value)?;

        let payload = &body[header_end..];
        if payload.len() != 8 * header.payload_len() {
            return Err(Error::SourceFree(format!(
                "payload holds {} bytes, schema allows exactly {}",
                payload.len(),
                8 * header.payload_len()
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let params = header
            .tensors
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                Ok(Parameter::new(t.name.clone(), Tensor::new(&t.shape, take(n))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let bn = header
            .batch_norm
            .iter()
            .map(|b| BnRunningStats {
                mean: take(b.channels),
                var: take(b.channels),
                momentum: b.momentum,
                eps: b.eps,
            })
            .collect();
        let model = Model::from_parts(header.spec, params, bn)?;
        Ok(Self {
            model,
            standardizer: header.standardizer,
            feature_names: header.feature_names,
            binning: header.binning,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fit_bins;

    fn sample_checkpoint() -> ModelCheckpoint {
        let spec = ArchitectureSpec::default_for(6, 5);
        let model = Model::build(&spec, 42).unwrap();
        ModelCheckpoint {
            model,
            standardizer: Standardizer {
                mean: vec![0.1, 0.2, 0.3, 0.4, 0.5, 1.0 / 3.0],
                std: vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.7],
            },
            feature_names: ["dni", "dhi", "ghi", "temp", "wind_dir", "wind_speed"]
                .map(String::from)
                .to_vec(),
            binning: fit_bins(&[0.0, 87.3], 5, "src").unwrap(),
            provenance: Provenance::new("src", 42, 3),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = ck.model.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(ModelCheckpoint::from_bytes(cut), Err(Error::Checksum { .. })));
        let mut flipped = bytes.clone();
        flipped[500] ^= 0x40;
        assert!(matches!(ModelCheckpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
    }

    fn reseal(header: &Value, payload: &[u8]) -> Vec<u8> {
        let h = serde_json::to_vec(header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn split_payload(ck: &ModelCheckpoint) -> (Value, Vec<u8>) {
        let bytes = ck.to_bytes().unwrap();
        let hl = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[10..10 + hl]).unwrap();
        (header, bytes[10 + hl..bytes.len() - 4].to_vec())
    }

    #[test]
    fn version_mismatch_rejected() {
        let (mut header, payload) = split_payload(&sample_checkpoint());
        header["format_version"] = Value::from("2");
        assert!(matches!(
            ModelCheckpoint::from_bytes(&reseal(&header, &payload)),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn sample_bearing_fields_rejected() {
        let (mut header, payload) = split_payload(&sample_checkpoint());
        header["train_samples"] = serde_json::json!([[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(validate_header(&header), Err(Error::SourceFree(_))));
        assert!(ModelCheckpoint::from_bytes(&reseal(&header, &payload)).is_err());

        let (mut header, _) = split_payload(&sample_checkpoint());
        header["provenance"]["labels"] = serde_json::json!([0, 1, 2]);
        assert!(matches!(validate_header(&header), Err(Error::SourceFree(_))));

        let (mut header, _) = split_payload(&sample_checkpoint());
        header["standardizer"]["mean"] = serde_json::json!(vec![0.0; 500]);
        assert!(matches!(validate_header(&header), Err(Error::SourceFree(_))));
    }

    #[test]
    fn trailing_payload_rejected() {
        let (header, mut payload) = split_payload(&sample_checkpoint());
        payload.extend_from_slice(&1.5f64.to_le_bytes());
        assert!(matches!(
            ModelCheckpoint::from_bytes(&reseal(&header, &payload)),
            Err(Error::SourceFree(_))
        ));
    }

    #[test]
    fn default_checkpoint_is_small() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let payload_bound = 8 * (ck.model.parameter_count() + 2 * (16 + 32));
        assert!(bytes.len() < payload_bound + 16 * 1024);
        assert!(bytes.len() < 1 << 20);
    }
}
