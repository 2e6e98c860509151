use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::train::TrainState;

pub const CHECKPOINT_FORMAT: &str = "rgtn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for a model: every tensor with its name, shape and data,
/// the architecture, the topology hash, and optionally the training state
/// needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub topology_hash: String,
    pub parameters: ModelParameters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(parameters: ModelParameters, topology_hash: &str) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            topology_hash: topology_hash.into(),
            parameters,
            training: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(format!("checkpoint encode: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint decode: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {:?} version {}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.parameters.validate()?;
        if let Some(state) = &ckpt.training {
            state.current_parameters.validate()?;
            state.best_parameters.validate()?;
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file in the same directory and renames it
    /// into place, so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fails unless the checkpoint was trained on the given topology.
    pub fn check_topology(&self, topology_hash: &str) -> Result<()> {
        if self.topology_hash != topology_hash {
            return Err(Error::Format(format!(
                "checkpoint topology {} does not match {}",
                self.topology_hash, topology_hash
            )));
        }
        Ok(())
    }
}
