use std::path::Path;

use physres_core::FaultModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("unsupported artifact format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("artifact checksum mismatch: recorded {recorded}, computed {computed}")]
    Checksum { recorded: String, computed: String },
    #[error("malformed artifact: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactBody {
    pub seed: u64,
    pub held_out: Option<u8>,
    pub config: RunConfig,
    pub model: FaultModel,
}

/// A trained model on disk. The checksum is the SHA-256 of the body's
/// compact JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub checksum: String,
    pub body: ArtifactBody,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn body_checksum(body: &ArtifactBody) -> Result<String, ArtifactError> {
    Ok(sha256_hex(&serde_json::to_vec(body)?))
}

impl ModelArtifact {
    pub fn new(body: ArtifactBody) -> Result<Self, ArtifactError> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            checksum: body_checksum(&body)?,
            body,
        })
    }

    pub fn to_json(&self) -> Result<String, ArtifactError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ArtifactError> {
        let a: ModelArtifact = serde_json::from_str(text)?;
        if a.format_version != FORMAT_VERSION {
            return Err(ArtifactError::Version { found: a.format_version });
        }
        let computed = body_checksum(&a.body)?;
        if computed != a.checksum {
            return Err(ArtifactError::Checksum {
                recorded: a.checksum,
                computed,
            });
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
