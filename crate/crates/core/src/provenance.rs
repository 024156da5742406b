use serde::{Deserialize, Serialize};

/// Config hash and seed embedded in every artifact the pipeline writes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    /// `config_hash=<hash> seed=<seed>`, used as a comment line in text outputs.
    pub fn header(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }
}
