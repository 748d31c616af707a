//! Experiment configuration: JSON with hard schema validation (unknown keys
//! are errors, never silently defaulted).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use zistorm_core::attack::AttackBudget;
use zistorm_core::error::{Error, Result};
use zistorm_core::stmodel::RegressorConfig;
use zistorm_core::trainer::{TrainConfig, WindowSpec};
use zistorm_core::zidata::{generate_synthetic_zid, load_dataset, SeriesDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub model: RegressorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<EvalAttack>,
    #[serde(default)]
    pub metrics: MetricsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        num_nodes: usize,
        length: usize,
        feature_dim: usize,
        zero_rate: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Path {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    Degree,
    Pagerank,
    Saliency,
    Mingre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAttack {
    pub name: String,
    pub kind: AttackKind,
    #[serde(default)]
    pub budget: AttackBudget,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct MetricsOptions {
    #[serde(default)]
    pub eval_split: EvalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::InvalidArgument(format!("config schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks beyond the serde schema.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.history != self.window.history || self.model.horizon != self.window.horizon {
            return Err(Error::InvalidArgument(format!(
                "model history/horizon ({}, {}) must match the window spec ({}, {})",
                self.model.history, self.model.horizon, self.window.history, self.window.horizon
            )));
        }
        if let DatasetSpec::Synthetic {
            num_nodes,
            length,
            feature_dim,
            zero_rate,
            ..
        } = &self.dataset
        {
            if !(0.5..=0.99).contains(zero_rate) {
                return Err(Error::InvalidArgument(format!(
                    "config schema error: zero_rate out of range: {zero_rate} not in [0.5, 0.99]"
                )));
            }
            if *num_nodes < 4 || *length < 64 || *feature_dim < 1 {
                return Err(Error::InvalidArgument(
                    "config schema error: synthetic dataset sizes are degenerate".into(),
                ));
            }
            if self.model.input_dim != *feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "model input_dim {} must match dataset feature_dim {feature_dim}",
                    self.model.input_dim
                )));
            }
        }
        for a in &self.attacks {
            a.budget.validate()?;
            if a.name.is_empty() {
                return Err(Error::InvalidArgument("attack name must not be empty".into()));
            }
        }
        let names: std::collections::HashSet<&str> =
            self.attacks.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.attacks.len() {
            return Err(Error::InvalidArgument("attack names must be unique".into()));
        }
        Ok(())
    }

    /// Apply a command-line seed override to every seeded component.
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            self.model.seed = s;
            self.train.mingre.seed = s;
            if let DatasetSpec::Synthetic { seed, .. } = &mut self.dataset {
                *seed = Some(s);
            }
        }
        self
    }

    pub fn hash(&self) -> String {
        zistorm_core::io::hex_digest(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    /// Materialize the dataset this config describes.
    pub fn build_dataset(&self) -> Result<SeriesDataset> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_nodes,
                length,
                feature_dim,
                zero_rate,
                seed,
            } => generate_synthetic_zid(
                *num_nodes,
                *length,
                *feature_dim,
                *zero_rate,
                seed.unwrap_or(self.seed),
            ),
            DatasetSpec::Path { path } => load_dataset(path),
        }
    }

}
