use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, NormSlot};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::synth::corpus::{read_json, write_json};
use crate::tensor::{NormState, Tensor};

pub const CHECKPOINT_FORMAT: &str = "sgvqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedNorm {
    pub name: String,
    pub slot: NormSlot,
    pub state: NormState,
}

/// Position of the training run's random streams; streams are counter-based
/// so the seed and the number of completed epochs pin them down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub preset: String,
    pub config: ModelConfig,
    pub vocab_fingerprint: String,
    pub params: Vec<NamedTensor>,
    pub norms: Vec<NamedNorm>,
    pub rng: RngState,
    /// Hash of the experiment config that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, rng: RngState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            preset: params.config().preset.name().into(),
            config: params.config().clone(),
            vocab_fingerprint: params.vocab_fingerprint.clone(),
            params: params
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
            norms: NormSlot::ALL
                .iter()
                .map(|&slot| NamedNorm { name: slot.name(), slot, state: params.net.norm(slot).clone() })
                .collect(),
            rng,
            config_hash: None,
        }
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    /// Rebuilds the parameter set; every stored tensor must match the
    /// architecture by name and shape.
    pub fn to_params(&self) -> Result<ModelParams> {
        let bad = |reason: String| Error::Format { path: "checkpoint".into(), reason };
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut params = ModelParams::init(self.config.clone(), 0, self.vocab_fingerprint.clone())?;
        if params.store.len() != self.params.len() {
            return Err(bad(format!("{} tensors stored, architecture has {}", self.params.len(), params.store.len())));
        }
        for nt in &self.params {
            let id = params.store.lookup(&nt.name).ok_or_else(|| bad(format!("unknown tensor {}", nt.name)))?;
            if params.store.get(id).shape() != nt.shape.as_slice() {
                return Err(bad(format!("tensor {} has shape {:?}", nt.name, nt.shape)));
            }
            *params.store.get_mut(id) = Tensor::new(&nt.shape, nt.data.clone())?.with_grad();
        }
        for n in &self.norms {
            let expected = params.net.norm(n.slot).features();
            if n.state.features() != expected {
                return Err(bad(format!("norm {} has {} features", n.name, n.state.features())));
            }
            params.net.norms[n.slot.index()] = n.state.clone();
        }
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            });
        }
        read_json(path)
    }
}
