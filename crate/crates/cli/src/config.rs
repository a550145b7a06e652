//! Run configuration: defaults, an optional TOML file, then command-line flags
//! on top. The resolved value is written into every run directory.

use std::path::{Path, PathBuf};

use left_core::spectral::filterbank::DEFAULT_TAU;
use left_core::training::TrainConfig;
use left_core::{
    synth_generate, Ablation, EncoderConfig, FilterbankState, FusionConfig, ModelConfig, ScoreWeights, SeriesDataset,
    SynthConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterbankSection {
    pub factors: Vec<usize>,
    pub tau: f64,
}

impl Default for FilterbankSection {
    fn default() -> Self {
        Self { factors: vec![16, 8, 4], tau: DEFAULT_TAU }
    }
}

/// Used when the dataset is `synth` and no such directory exists under the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub length: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { length: 20_000, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: String,
    pub data_root: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub score: ScoreWeights,
    pub filterbank: FilterbankSection,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub ablation: Ablation,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "synth".into(),
            data_root: None,
            out: PathBuf::from("runs/latest"),
            train: TrainConfig::default(),
            score: ScoreWeights::default(),
            filterbank: FilterbankSection::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            ablation: Ablation::FULL,
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Everything that can be checked without the dataset.
    pub fn validate(&self) -> CliResult<()> {
        if self.dataset.is_empty() {
            return Err(CliError::Input("no dataset given".into()));
        }
        self.train.validate()?;
        self.score.validate()?;
        self.fusion.validate()?;
        self.encoder.validate(self.filterbank.factors.len())?;
        FilterbankState::with_params(vec![0.0; self.filterbank.factors.len()], self.filterbank.factors.clone(), self.filterbank.tau)?;
        if self.train.loss_weights.omega.len() != self.filterbank.factors.len() {
            return Err(CliError::Input(format!(
                "{} scale weights for {} bands",
                self.train.loss_weights.omega.len(),
                self.filterbank.factors.len()
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &SeriesDataset) -> CliResult<ModelConfig> {
        let mut cfg = ModelConfig::new(ds.window, ds.channels());
        cfg.factors = self.filterbank.factors.clone();
        cfg.tau = self.filterbank.tau;
        cfg.encoder = self.encoder.clone();
        cfg.fusion = self.fusion.clone();
        cfg.ablation = self.ablation;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Load the configured dataset, standardized with training statistics.
    pub fn load_dataset(&self) -> CliResult<SeriesDataset> {
        let root = self.data_root();
        if self.dataset == "synth" && !root.join("synth").join("manifest.toml").exists() {
            log::info!("generating the synthetic corpus ({} samples, seed {})", self.synth.length, self.synth.seed);
            let mut ds = synth_generate(&SynthConfig::with_length(self.synth.length, self.synth.seed))?;
            ds.standardize();
            return Ok(ds);
        }
        Ok(left_core::load_dataset(&root, &self.dataset)?)
    }

    pub fn write_snapshot(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let text = toml::to_string(self).map_err(|e| CliError::Input(format!("cannot serialize config: {e}")))?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, text).map_err(CliError::io(path))
    }
}
