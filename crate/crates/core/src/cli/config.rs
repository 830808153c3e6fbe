use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptConfig;
use crate::baselines::ForestParams;
use crate::data::SplitRatios;
use crate::synth::ClimateParams;
use crate::training::TrainConfig;

/// The six channels used when feature selection is switched off.
pub const DEFAULT_FEATURES: [&str; 6] = ["dni", "dhi", "ghi", "temp", "wind_dir", "wind_speed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub rf: ForestParams,
    pub adaboost_rounds: usize,
    pub gbm_rounds: usize,
    pub gbm_learning_rate: f64,
    pub gbm_depth: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            rf: ForestParams::default(),
            adaboost_rounds: 100,
            gbm_rounds: 100,
            gbm_learning_rate: 0.1,
            gbm_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub days: usize,
    pub step_minutes: i64,
    /// Shift between the source and target of the `synth` command.
    pub shift: f64,
    pub base: ClimateParams,
    /// Climate presets forming the `bench` matrix.
    pub domains: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            days: 365,
            step_minutes: 30,
            shift: 1.0,
            base: ClimateParams::default(),
            domains: ["arid", "humid", "continental"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub n_classes: usize,
    pub split: SplitRatios,
    /// Averaging interval applied by `prepare` when the input is finer.
    pub resample_minutes: Option<i64>,
    pub standardize: bool,
    pub feature_selection: bool,
    pub k_features: usize,
    pub importance_trees: usize,
    /// Model inputs when feature selection is off.
    pub features: Vec<String>,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub baselines: BaselineConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_data: None,
            target_data: None,
            output_dir: None,
            n_classes: 5,
            split: SplitRatios::default(),
            resample_minutes: Some(30),
            standardize: true,
            feature_selection: true,
            k_features: 6,
            importance_trees: 100,
            features: DEFAULT_FEATURES.map(String::from).to_vec(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            baselines: BaselineConfig::default(),
            synth: SynthConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Pushes the experiment seed into every subordinate component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.adapt.seed = seed;
        self.synth.base.seed = seed;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.split.validate().map_err(|e| e.to_string())?;
        if self.k_features == 0 {
            return Err("k_features must be at least 1".into());
        }
        if self.synth.step_minutes <= 0 {
            return Err("synth.step_minutes must be positive".into());
        }
        if matches!(self.resample_minutes, Some(m) if m <= 0) {
            return Err("resample_minutes must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
