//! Run configuration: one TOML section per stage, every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::error::{CoreError, Result};
use crate::eval::Smoothing;
use crate::lm::LmConfig;
use crate::lrp::LrpConfig;
use crate::seq2seq::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::{Stage1Config, Stage2Config};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub smoothing: Smoothing,
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub classifier: ClassifierConfig,
    pub lm: LmConfig,
    pub model: ModelConfig,
    pub lrp: LrpConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Reads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.model.validate()?;
        self.lrp.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Applies one global seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.seed = seed;
        self.classifier.seed = seed;
        self.lm.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
