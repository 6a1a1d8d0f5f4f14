//! Named-tensor checkpoints with the model config, topic list and
//! vocabulary embedded, so a single file is enough to decode.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};
use crate::io::{read_text, write_atomic};
use crate::model::{FaeGenConfig, FaeGenParams};
use crate::vocab::{VocabEntry, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FaeGenConfig,
    pub topics: Vec<String>,
    pub vocab: Vocabulary,
    pub params: FaeGenParams,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format_version: u32,
    config: FaeGenConfig,
    topics: Vec<String>,
    vocab: Vec<VocabEntry>,
    tensors: Vec<StoredTensor>,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let stored = Stored {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            topics: self.topics.clone(),
            vocab: self.vocab.entries().to_vec(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|t| StoredTensor {
                    name: t.name,
                    shape: t.shape,
                    values: t.values.to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_string(&stored).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored =
            serde_json::from_str(text).map_err(|e| FaeError::Checkpoint(e.to_string()))?;
        if stored.format_version != FORMAT_VERSION {
            return Err(FaeError::Checkpoint(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                stored.format_version
            )));
        }
        let config = stored.config;
        config.validate()?;
        if stored.topics.len() != config.num_topics {
            return Err(FaeError::Checkpoint(format!(
                "{} topic names for {} topics",
                stored.topics.len(),
                config.num_topics
            )));
        }
        let vocab = Vocabulary::from_entries(stored.vocab)?;
        if vocab.len() != config.vocab_size {
            return Err(FaeError::Checkpoint(format!(
                "vocabulary has {} entries, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }

        let mut params = FaeGenParams::zeros(&config);
        let mut seen = HashSet::new();
        {
            let mut slots = params.tensors_mut();
            for t in stored.tensors {
                let slot = slots
                    .iter_mut()
                    .find(|s| s.name == t.name)
                    .ok_or_else(|| FaeError::Checkpoint(format!("unknown tensor {}", t.name)))?;
                if !seen.insert(t.name.clone()) {
                    return Err(FaeError::Checkpoint(format!("duplicate tensor {}", t.name)));
                }
                if t.shape != slot.shape || t.values.len() != slot.values.len() {
                    return Err(FaeError::Checkpoint(format!(
                        "tensor {}: shape {:?} with {} values, config expects {:?}",
                        t.name,
                        t.shape,
                        t.values.len(),
                        slot.shape
                    )));
                }
                slot.values.copy_from_slice(&t.values);
            }
            if let Some(missing) = slots.iter().find(|s| !seen.contains(&s.name)) {
                return Err(FaeError::Checkpoint(format!("missing tensor {}", missing.name)));
            }
        }
        Ok(Checkpoint {
            config,
            topics: stored.topics,
            vocab,
            params,
            meta: stored.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&read_text(path)?)
    }
}
