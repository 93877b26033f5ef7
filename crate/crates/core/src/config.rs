//! Run configuration file (TOML). Every field has a default, so an empty
//! file is a valid configuration.
//!
//! ```toml
//! seed = 13
//!
//! [model]
//! embedding_dim = 200
//! hidden_size = 256
//!
//! [train]
//! k = 5
//! batch_size = 4
//! mode = "ne_constrained"   # or "uniform"
//! weighting = "hardness"     # or "uniform"
//!
//! [adapt]
//! sizes = [5, 10, 20, 50]
//! repeats = 20
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::UnkPolicy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::AdaptationConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub unk_policy: UnkPolicy,
    /// Reject (false) or rewrite (true) dangling `I-` tags when loading corpora.
    pub repair_tags: bool,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub adapt: AdaptationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
