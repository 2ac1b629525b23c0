//! Experiment configuration: one TOML file wiring data generation, the
//! frozen backbone, adapters/training, and evaluation settings together.
//!
//! Unknown keys are rejected. At load time the experiment's `master_seed`
//! is pushed down into `data.master_seed` and `train.backbone_seed`, so a
//! single knob moves all randomness; per-run seeds stay in `train.seeds`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::default_rejection_rates;
use crate::synthdata::SynthConfig;
use crate::training::TrainConfig;

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "MODE_LAB_OUTPUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_bins: usize,
    pub rejection_rates: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_bins: 10, rejection_rates: default_rejection_rates() }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 1 {
            return Err(Error::config("eval.n_bins must be >= 1"));
        }
        if self.rejection_rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::config("eval.rejection_rates must lie in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_root: PathBuf,
    pub master_seed: u64,
    pub data: SynthConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_root: PathBuf::from("runs"),
            master_seed: 7,
            data: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse, resolve seeds, apply the output-root environment override,
    /// and validate.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Push the master seed into the nested sections and apply the
    /// environment override for the output root.
    pub fn resolved(mut self) -> ExperimentConfig {
        self.data.master_seed = self.master_seed;
        self.train.backbone_seed = self.master_seed;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                self.output_root = PathBuf::from(root);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.backbone.d_in != self.data.d_in {
            return Err(Error::config(format!(
                "backbone.d_in {} must match data.d_in {}",
                self.backbone.d_in, self.data.d_in
            )));
        }
        if self.backbone.max_seq_len < self.data.seq_len {
            return Err(Error::config(format!(
                "backbone.max_seq_len {} is shorter than data.seq_len {}",
                self.backbone.max_seq_len, self.data.seq_len
            )));
        }
        Ok(())
    }

    /// Stable hash of the resolved config (hex SHA-256 of canonical JSON).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// The full resolved config as TOML, for echoing into run directories.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config encode: {}", e)))
    }

    /// Default location of the generated dataset under the output root.
    pub fn dataset_dir(&self) -> PathBuf {
        self.output_root.join("dataset")
    }
}
