use std::fs;
use std::path::Path;

use qrec_core::{Error, LogLinearPolicy, PolicySpec, Result, TrainerState};
use serde::{Deserialize, Serialize};

use crate::world::write_json;

pub const FORMAT_VERSION: u32 = 1;

/// JSON checkpoint: weight matrix, featurization layout, the hash of the
/// run configuration and, for training checkpoints, the resumable state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: PolicySpec,
    pub spec_hash: String,
    pub config_hash: String,
    pub resume_hash: String,
    pub epoch: usize,
    pub global_step: usize,
    pub weights: Vec<f64>,
    pub state: Option<TrainerState>,
}

impl Checkpoint {
    pub fn from_policy(policy: &LogLinearPolicy, config_hash: String, resume_hash: String) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            spec: *policy.spec(),
            spec_hash: policy.spec().hash(),
            config_hash,
            resume_hash,
            epoch: 0,
            global_step: 0,
            weights: policy.weights().to_vec(),
            state: None,
        }
    }

    pub fn from_state(
        state: &TrainerState,
        policy: &LogLinearPolicy,
        config_hash: String,
        resume_hash: String,
    ) -> Self {
        Checkpoint {
            epoch: state.epochs_completed,
            global_step: state.global_step,
            state: Some(state.clone()),
            ..Self::from_policy(policy, config_hash, resume_hash)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                ck.format_version
            )));
        }
        if ck.spec.hash() != ck.spec_hash {
            return Err(Error::Validation(format!(
                "{}: layout hash does not match its layout",
                path.display()
            )));
        }
        Ok(ck)
    }

    /// The stored policy, provided it fits the `expected` layout.
    pub fn policy_for(&self, expected: &PolicySpec) -> Result<LogLinearPolicy> {
        if self.spec_hash != expected.hash() {
            return Err(Error::Validation(format!(
                "incompatible checkpoint: layout hash {} does not match this environment ({})",
                self.spec_hash,
                expected.hash()
            )));
        }
        LogLinearPolicy::from_weights(self.spec, self.weights.clone())
    }
}
