use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::DatasetSpec;
use crate::error::{Error, Result};
use crate::learning::{TrainConfig, TrainMode};
use crate::models::{Coupling, InferenceCoupling, ModelConfig};
use crate::samplers::LangevinConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Steps between metric rows.
    pub metrics_every: u64,
    /// Steps between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            metrics_every: 10,
            checkpoint_every: 0,
        }
    }
}

fn latent_sampler() -> LangevinConfig {
    LangevinConfig::latent_space()
}

/// Everything a run needs. Every field has a default, so an empty file is a
/// valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler_x: LangevinConfig,
    #[serde(default = "latent_sampler")]
    pub sampler_z: LangevinConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler_x: LangevinConfig::data_space(),
            sampler_z: LangevinConfig::latent_space(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.sampler_x.validate("sampler_x")?;
        self.sampler_z.validate("sampler_z")?;
        if self.train.batch_size > self.dataset.train_size {
            return Err(Error::Config(format!(
                "train.batch_size = {} exceeds dataset.train_size = {}",
                self.train.batch_size, self.dataset.train_size
            )));
        }
        let steps = self.train.total_steps;
        if self.output.metrics_every == 0 || (steps > 0 && steps % self.output.metrics_every != 0) {
            return Err(Error::Config(format!(
                "output.metrics_every = {} must be positive and divide train.total_steps = {steps}",
                self.output.metrics_every
            )));
        }
        let ck = self.output.checkpoint_every;
        if ck > 0 && steps % ck != 0 {
            return Err(Error::Config(format!(
                "output.checkpoint_every = {ck} must divide train.total_steps = {steps}"
            )));
        }
        self.resolved_model()?.validate()
    }

    /// Model config with dataset widths filled in and the training mode's
    /// coupling applied.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        let dims = self.dataset.modality_dims();
        if m.modality_dims.is_empty() {
            m.modality_dims = dims;
        } else if m.modality_dims != dims {
            return Err(Error::Config(format!(
                "model.modality_dims {:?} disagree with the dataset's {:?}",
                m.modality_dims, dims
            )));
        }
        match self.train.mode {
            TrainMode::IndependentGenerator => m.coupling = Coupling::Independent,
            TrainMode::IndependentInference => m.inference_coupling = InferenceCoupling::Independent,
            TrainMode::Cooperative | TrainMode::MleEbm => {}
        }
        Ok(m)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
