//! Pipeline configuration file (TOML or JSON) shared by every stage.

use std::fs;
use std::path::{Path, PathBuf};

use diop::features::FeatureConfig;
use diop::instances::DeriveConfig;
use diop::learn::EvalConfig;
use diop::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Default artifact locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory holding `manifest.json`.
    pub data: PathBuf,
    pub instances: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
    pub explanation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            instances: "instances".into(),
            features: "features.csv".into(),
            model: "model.json".into(),
            report: "report.json".into(),
            explanation: "explanation.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed of the train, eval and explain stages. `synth.seed` seeds
    /// dataset generation.
    pub seed: u64,
    pub repeats: usize,
    pub synth: SynthConfig,
    pub derive: DeriveConfig,
    pub features: FeatureConfig,
    pub learn: EvalConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 10,
            synth: SynthConfig::default(),
            derive: DeriveConfig::default(),
            features: FeatureConfig::default(),
            learn: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a `.toml` or `.json` file; any other extension is parsed as TOML.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        let forest = &self.learn.forest;
        if forest.n_trees == 0 {
            return Err(CliError::Config("learn.forest.n_trees must be at least 1".into()));
        }
        if forest.min_leaf == 0 {
            return Err(CliError::Config("learn.forest.min_leaf must be at least 1".into()));
        }
        if forest.features_per_split == Some(0) || forest.max_depth == Some(0) {
            return Err(CliError::Config("learn.forest limits must be positive".into()));
        }
        if self.learn.pca_k == 0 {
            return Err(CliError::Config("learn.pca_k must be at least 1".into()));
        }
        if self.learn.forest_size_candidates.contains(&0) {
            return Err(CliError::Config("learn.forest_size_candidates must be positive".into()));
        }
        Ok(())
    }
}
