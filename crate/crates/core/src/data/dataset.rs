use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::binning::{fit_bins, BinningScheme};
use super::frame::{drop_missing, TimeSeriesFrame, POWER_CHANNEL};
use super::split::{SplitRatios, SplitTag};
use super::standardize::Standardizer;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: &str = "1";

/// Standardized feature matrix with integer power classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    binning: BinningScheme,
    standardizer: Standardizer,
    split: SplitTag,
    domain_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: String,
    domain_id: String,
    split: SplitTag,
    n_samples: usize,
    feature_names: Vec<String>,
    binning: BinningScheme,
    standardizer: Standardizer,
    label_histogram: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        binning: BinningScheme,
        standardizer: Standardizer,
        split: SplitTag,
        domain_id: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            feature_names,
            binning,
            standardizer,
            split,
            domain_id: domain_id.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let k = self.feature_names.len();
        if k == 0 {
            return Err(Error::invalid("dataset has no features"));
        }
        if self.features.len() != self.labels.len() * k {
            return Err(Error::invalid(format!(
                "{} feature values for {} rows of {k} features",
                self.features.len(),
                self.labels.len()
            )));
        }
        if self.standardizer.n_features() != k {
            return Err(Error::invalid("standardizer width differs from feature count"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        self.binning.validate()?;
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.binning.n_classes) {
            return Err(Error::invalid(format!(
                "label {l} outside [0, {})",
                self.binning.n_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.binning.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_features();
        &self.features[i * k..(i + 1) * k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn binning(&self) -> &BinningScheme {
        &self.binning
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Features mapped back to physical units.
    pub fn raw_features(&self) -> Vec<f64> {
        self.standardizer.invert(&self.features)
    }

    /// Re-expresses the features under another domain's standardizer.
    pub fn restandardized(&self, stats: &Standardizer) -> Result<Self> {
        if stats.n_features() != self.n_features() {
            return Err(Error::invalid("standardizer width differs from feature count"));
        }
        if *stats == self.standardizer {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.features = stats.apply(&self.raw_features());
        out.standardizer = stats.clone();
        Ok(out)
    }

    /// Keeps only the named features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::invalid(format!("unknown feature {n:?}")))
            })
            .collect::<Result<_>>()?;
        if idx.is_empty() {
            return Err(Error::invalid("feature selection is empty"));
        }
        let k = self.n_features();
        let features = self
            .features
            .chunks(k)
            .flat_map(|row| idx.iter().map(move |&j| row[j]))
            .collect();
        Self::new(
            features,
            self.labels.clone(),
            names.to_vec(),
            self.binning.clone(),
            self.standardizer.subset(&idx),
            self.split,
            self.domain_id.clone(),
        )
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let k = self.n_features();
        let mut out = self.clone();
        out.features = self.features[range.start * k..range.end * k].to_vec();
        out.labels = self.labels[range].to_vec();
        out
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn with_domain_id(mut self, domain_id: impl Into<String>) -> Self {
        self.domain_id = domain_id.into();
        self
    }

    /// Writes `features.csv`, `labels.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("features.csv");
        let io = |e| Error::io(&path, e);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io)?);
        writeln!(w, "{}", self.feature_names.join(",")).map_err(io)?;
        for row in self.features.chunks(self.n_features()) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let path = dir.join("labels.csv");
        let io = |e| Error::io(&path, e);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io)?);
        writeln!(w, "label").map_err(io)?;
        for l in &self.labels {
            writeln!(w, "{l}").map_err(io)?;
        }
        w.flush().map_err(io)?;

        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION.into(),
            domain_id: self.domain_id.clone(),
            split: self.split,
            n_samples: self.len(),
            feature_names: self.feature_names.clone(),
            binning: self.binning.clone(),
            standardizer: self.standardizer.clone(),
            label_histogram: self.label_histogram(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                found: meta.format_version,
                expected: DATASET_FORMAT_VERSION.into(),
            });
        }
        let features = read_numeric_csv(&dir.join("features.csv"), meta.feature_names.len())?;
        let labels: Vec<usize> = read_numeric_csv(&dir.join("labels.csv"), 1)?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        if labels.len() != meta.n_samples {
            return Err(Error::invalid(format!(
                "meta.json declares {} samples, labels.csv has {}",
                meta.n_samples,
                labels.len()
            )));
        }
        Self::new(
            features,
            labels,
            meta.feature_names,
            meta.binning,
            meta.standardizer,
            meta.split,
            meta.domain_id,
        )
    }
}

fn read_numeric_csv(path: &Path, width: usize) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for field in rec.iter() {
            out.push(field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric value {field:?}"),
            })?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub domain_id: String,
    pub n_classes: usize,
    pub ratios: SplitRatios,
    /// Feature channels in model order; empty means every non-power channel.
    pub features: Vec<String>,
    pub standardize: bool,
}

impl PrepareOptions {
    pub fn new(domain_id: impl Into<String>) -> Self {
        Self {
            domain_id: domain_id.into(),
            n_classes: 5,
            ratios: SplitRatios::default(),
            features: Vec::new(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub rows_in: usize,
    pub rows_dropped_missing: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_label_histogram: Vec<usize>,
    pub clamped_labels: usize,
    pub floored_columns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PreparedDomain {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub report: PrepareReport,
}

/// Drop NaN rows → chronological split → bins and standardizer fitted on the
/// training split → labeled train/val/test datasets.
pub fn prepare_frame(frame: &TimeSeriesFrame, opts: &PrepareOptions) -> Result<PreparedDomain> {
    frame
        .channel(POWER_CHANNEL)
        .ok_or_else(|| Error::invalid(format!("frame has no {POWER_CHANNEL} channel")))?;
    let feature_names: Vec<String> = if opts.features.is_empty() {
        frame
            .channel_names()
            .filter(|c| *c != POWER_CHANNEL)
            .map(String::from)
            .collect()
    } else {
        opts.features.clone()
    };
    for f in &feature_names {
        if f == POWER_CHANNEL || frame.channel(f).is_none() {
            return Err(Error::invalid(format!("feature {f:?} not available in frame")));
        }
    }
    let (clean, dropped) = drop_missing(frame);
    if dropped > 0 {
        log::warn!("dropped {dropped} rows containing NaN");
    }
    let [tr, va, te] = opts.ratios.ranges(clean.len())?;
    let power = clean.channel(POWER_CHANNEL).expect("checked above");
    let binning = fit_bins(&power[tr.clone()], opts.n_classes, &opts.domain_id)?;
    let (labels, clamped) = binning.assign_all(power)?;

    let k = feature_names.len();
    let columns: Vec<&[f64]> = feature_names
        .iter()
        .map(|f| clean.channel(f).expect("checked above"))
        .collect();
    let mut raw = Vec::with_capacity(clean.len() * k);
    for i in 0..clean.len() {
        raw.extend(columns.iter().map(|c| c[i]));
    }
    let (standardizer, floored) = if opts.standardize {
        Standardizer::fit(&raw[tr.start * k..tr.end * k], k)?
    } else {
        (Standardizer::identity(k), Vec::new())
    };
    let features = standardizer.apply(&raw);
    let make = |range: std::ops::Range<usize>, tag| {
        LabeledDataset::new(
            features[range.start * k..range.end * k].to_vec(),
            labels[range].to_vec(),
            feature_names.clone(),
            binning.clone(),
            standardizer.clone(),
            tag,
            opts.domain_id.clone(),
        )
    };
    let train = make(tr, SplitTag::Train)?;
    let val = make(va, SplitTag::Val)?;
    let test = make(te, SplitTag::Test)?;
    let report = PrepareReport {
        rows_in: frame.len(),
        rows_dropped_missing: dropped,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        train_label_histogram: train.label_histogram(),
        clamped_labels: clamped,
        floored_columns: floored.iter().map(|&j| feature_names[j].clone()).collect(),
    };
    Ok(PreparedDomain {
        train,
        val,
        test,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use indexmap::IndexMap;

    fn toy_frame(n: usize) -> TimeSeriesFrame {
        let t0 = Utc.with_ymd_and_hms(2006, 1, 1, 0, 0, 0).unwrap();
        let stamps = (0..n).map(|i| t0 + Duration::minutes(30 * i as i64)).collect();
        let mut ch = IndexMap::new();
        ch.insert("ghi".into(), (0..n).map(|i| (i % 10) as f64 * 100.0).collect());
        ch.insert("temp".into(), (0..n).map(|i| 10.0 + (i % 7) as f64).collect());
        ch.insert("power_kw".into(), (0..n).map(|i| (i % 10) as f64).collect());
        TimeSeriesFrame::new(stamps, ch, IndexMap::new()).unwrap()
    }

    #[test]
    fn prepare_produces_consistent_splits() {
        let p = prepare_frame(&toy_frame(100), &PrepareOptions::new("toy")).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (70, 15, 15));
        assert_eq!(p.train.feature_names(), &["ghi".to_string(), "temp".to_string()]);
        assert_eq!(p.train.binning().edges.last(), Some(&9.0));
        assert_eq!(p.train.standardizer(), p.test.standardizer());
        assert_eq!(p.report.train_label_histogram.iter().sum::<usize>(), 70);
    }

    #[test]
    fn save_load_round_trip() {
        let p = prepare_frame(&toy_frame(40), &PrepareOptions::new("toy")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.val.save(dir.path()).unwrap();
        let back = LabeledDataset::load(dir.path()).unwrap();
        assert_eq!(back, p.val);
    }

    #[test]
    fn select_and_restandardize() {
        let p = prepare_frame(&toy_frame(100), &PrepareOptions::new("toy")).unwrap();
        let only_temp = p.train.select_features(&["temp".into()]).unwrap();
        assert_eq!(only_temp.n_features(), 1);
        assert_eq!(only_temp.row(3)[0], p.train.row(3)[1]);
        assert!(p.train.select_features(&["dni".into()]).is_err());

        let ident = Standardizer::identity(2);
        let raw = p.train.restandardized(&ident).unwrap();
        assert!((raw.row(5)[0] - 500.0).abs() < 1e-9);
    }

    #[test]
    fn nan_features_rejected() {
        let b = fit_bins(&[1.0], 2, "x").unwrap();
        let r = LabeledDataset::new(
            vec![f64::NAN],
            vec![0],
            vec!["ghi".into()],
            b,
            Standardizer::identity(1),
            SplitTag::Train,
            "x",
        );
        assert!(r.is_err());
    }
}
