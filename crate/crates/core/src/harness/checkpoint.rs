//! On-disk layout of a trained run:
//!
//! ```text
//! manifest.json     sizes, fingerprints and training summary
//! params.json       parameter tensors
//! vocab.json        id-ordered token list
//! priorities.json   slot id -> priority, with the sampler settings
//! ```

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{RunConfig, TrainHistory, TrainedRun};
use crate::autodiff::ParamStore;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{KnowledgeBase, MemoryModel, ModelConfig};
use crate::sampler::{PriorityState, SamplingStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fold: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub memory_slots: usize,
    pub memory_fingerprint: String,
    pub history: TrainHistory,
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorityFile {
    strategy: SamplingStrategy,
    sample_size: usize,
    epsilon: f64,
    alpha: f64,
    filter_negatives: bool,
    updates: u64,
    priorities: IndexMap<String, f64>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: MemoryModel,
    pub priorities: PriorityState,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

pub fn save_checkpoint(
    dir: &Path,
    run: &TrainedRun,
    kb: &KnowledgeBase,
    fold: usize,
    config: &RunConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = run.model.vocab();
    let manifest = Manifest {
        fold,
        seed: run.seed,
        model: *run.model.config(),
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        memory_slots: kb.len(),
        memory_fingerprint: kb.fingerprint(),
        history: run.history.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    run.model.params().save(&dir.join("params.json"))?;
    write_json(&dir.join("vocab.json"), &vocab.tokens())?;
    let priorities = PriorityFile {
        strategy: config.strategy,
        sample_size: config.sample_size,
        epsilon: config.epsilon,
        alpha: config.alpha,
        filter_negatives: config.filter_negatives,
        updates: run.priorities.updates,
        priorities: kb
            .slots()
            .iter()
            .zip(run.priorities.priorities())
            .map(|(s, &p)| (s.id.clone(), p))
            .collect(),
    };
    write_json(&dir.join("priorities.json"), &priorities)
}

/// Loads a checkpoint, refusing one trained against a different memory or
/// whose vocabulary does not match its manifest.
pub fn load_checkpoint(dir: &Path, kb: &KnowledgeBase) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.memory_fingerprint != kb.fingerprint() {
        return Err(Error::data(format!(
            "{} was trained on a different knowledge base",
            dir.display()
        )));
    }
    let vocab = Vocabulary::from_tokens(read_json(&dir.join("vocab.json"))?)?;
    if vocab.fingerprint() != manifest.vocab_fingerprint {
        return Err(Error::data(format!(
            "{}: vocabulary does not match manifest",
            dir.display()
        )));
    }
    let params = ParamStore::load(&dir.join("params.json"))?;
    let model = MemoryModel::from_parts(manifest.model, vocab, params)?;
    let file: PriorityFile = read_json(&dir.join("priorities.json"))?;
    if file.priorities.len() != kb.len() || file.priorities.keys().zip(kb.slots()).any(|(id, s)| *id != s.id) {
        return Err(Error::data(format!(
            "{}: priorities do not match memory slots",
            dir.display()
        )));
    }
    let mut priorities = PriorityState::from_priorities(file.priorities.into_values().collect())?;
    priorities.updates = file.updates;
    Ok(Checkpoint {
        manifest,
        model,
        priorities,
    })
}
