//! Self-describing checkpoint archive.
//!
//! JSON with parameters keyed by their hierarchical names, values stored as
//! base64 little-endian `f64` so load/save round-trips are bit-exact. The key
//! set is the compatibility contract for adapter fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ParamStore;
use crate::prompts;

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_FORMAT: &str = "echoprompt-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    BadFormat(String),
    #[error("parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Origin of a fine-tuned checkpoint: which base it came from and which
/// parameters were allowed to move.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub base_digest: String,
    pub trainable: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    prompt_vocab: PromptVocab,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    params: BTreeMap<String, StoredParam>,
}

/// The canonical orderings the one-hot blocks were encoded under.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptVocab {
    nature: Vec<String>,
    position: Vec<String>,
    task: Vec<String>,
    input_type: Vec<String>,
}

impl PromptVocab {
    fn current() -> Self {
        Self {
            nature: prompts::NATURE_VALUES.iter().map(|v| v.name().to_string()).collect(),
            position: prompts::POSITION_VALUES.iter().map(|v| v.name().to_string()).collect(),
            task: prompts::TASK_VALUES.iter().map(|v| v.name().to_string()).collect(),
            input_type: prompts::TYPE_VALUES.iter().map(|v| v.name().to_string()).collect(),
        }
    }
}

/// Checkpoint fields other than the parameters themselves.
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub provenance: Option<Provenance>,
    /// SHA-256 of the file as read.
    pub digest: String,
}

pub fn save_checkpoint(
    model: &Model,
    path: &Path,
    provenance: Option<Provenance>,
) -> Result<(), CheckpointError> {
    let mut params = BTreeMap::new();
    for (name, p) in model.params.iter() {
        let mut bytes = Vec::with_capacity(p.data.len() * 8);
        for &v in p.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        params.insert(
            name.to_string(),
            StoredParam {
                shape: p.data.shape().to_vec(),
                data_b64: B64.encode(&bytes),
            },
        );
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        prompt_vocab: PromptVocab::current(),
        provenance,
        params,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let digest = sha256_hex(&bytes);
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::BadFormat(file.format));
    }
    let mut store = ParamStore::new();
    for (name, sp) in &file.params {
        let bytes = B64
            .decode(&sp.data_b64)
            .map_err(|e| CheckpointError::BadParameter {
                name: name.clone(),
                reason: e.to_string(),
            })?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::BadParameter {
                name: name.clone(),
                reason: "payload not a multiple of 8 bytes".into(),
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = sp.shape.iter().product();
        if vals.len() != expected {
            return Err(CheckpointError::BadParameter {
                name: name.clone(),
                reason: format!("{} values for shape {:?}", vals.len(), sp.shape),
            });
        }
        store.insert(name, ArrayD::from_shape_vec(IxDyn(&sp.shape), vals).unwrap());
    }
    let model = Model::from_store(file.config.clone(), store)?;
    Ok((
        model,
        CheckpointMeta {
            config: file.config,
            provenance: file.provenance,
            digest,
        },
    ))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
