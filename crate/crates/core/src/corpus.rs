//! Labelled examples, knowledge files, fold splitting and a synthetic
//! corpus generator.
//!
//! Examples and knowledge are stored as line-delimited JSON:
//!
//! ```text
//! examples.jsonl   {"id": "e1", "tokens": ["..."], "label": 1, "targets": ["s3"], "topic": "t"}
//! knowledge.jsonl  {"slot_id": "s3", "tokens": ["..."]}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KnowledgeBase, MemorySlot};
use crate::seed::derive_seed;

/// A labelled text. Positives may lack targets; negatives never have any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KnowledgeRecord {
    slot_id: String,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TopicStats {
    pub examples: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub slots: usize,
    pub positive_ratio: f64,
    /// Positives with at least one target.
    pub annotated_positives: usize,
    /// Mean target count over annotated positives.
    pub targets_per_positive: f64,
    pub topics: BTreeMap<String, TopicStats>,
}

/// A validated dataset together with its knowledge base.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub examples: Vec<Example>,
    pub knowledge: KnowledgeBase,
    pub scenario: String,
    pub stats: CorpusStats,
}

impl CorpusBundle {
    pub fn new(examples: Vec<Example>, knowledge: KnowledgeBase, scenario: impl Into<String>) -> Result<Self> {
        let mut ids = HashSet::new();
        for ex in &examples {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::data(format!("duplicate example id `{}`", ex.id)));
            }
            if ex.label > 1 {
                return Err(Error::data(format!(
                    "example `{}` has non-binary label {}",
                    ex.id, ex.label
                )));
            }
            if ex.tokens.is_empty() {
                return Err(Error::data(format!("example `{}` has no tokens", ex.id)));
            }
            if ex.label == 0 && !ex.targets.is_empty() {
                return Err(Error::data(format!("negative example `{}` lists targets", ex.id)));
            }
            if let Some(t) = ex.targets.iter().find(|t| knowledge.index_of(t).is_none()) {
                return Err(Error::data(format!("example `{}` targets unknown slot `{t}`", ex.id)));
            }
        }
        let stats = compute_stats(&examples, &knowledge);
        Ok(Self {
            examples,
            knowledge,
            scenario: scenario.into(),
            stats,
        })
    }

    /// Global slot indices of an example's targets.
    pub fn target_indices(&self, example: &Example) -> Vec<usize> {
        example
            .targets
            .iter()
            .filter_map(|t| self.knowledge.index_of(t))
            .collect()
    }
}

fn compute_stats(examples: &[Example], knowledge: &KnowledgeBase) -> CorpusStats {
    let positives = examples.iter().filter(|e| e.label == 1).count();
    let annotated: Vec<&Example> = examples
        .iter()
        .filter(|e| e.label == 1 && !e.targets.is_empty())
        .collect();
    let mut topics: BTreeMap<String, TopicStats> = BTreeMap::new();
    for e in examples {
        if let Some(t) = &e.topic {
            let s = topics.entry(t.clone()).or_default();
            s.examples += 1;
            s.positives += e.label;
        }
    }
    CorpusStats {
        examples: examples.len(),
        positives,
        negatives: examples.len() - positives,
        slots: knowledge.len(),
        positive_ratio: if examples.is_empty() {
            0.0
        } else {
            positives as f64 / examples.len() as f64
        },
        annotated_positives: annotated.len(),
        targets_per_positive: if annotated.is_empty() {
            0.0
        } else {
            annotated.iter().map(|e| e.targets.len()).sum::<usize>() as f64 / annotated.len() as f64
        },
        topics,
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("{} line {}", path.display(), i + 1),
            source,
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_knowledge(path: &Path) -> Result<KnowledgeBase> {
    let records: Vec<KnowledgeRecord> = read_jsonl(path)?;
    KnowledgeBase::new(
        records
            .into_iter()
            .map(|r| MemorySlot {
                id: r.slot_id,
                tokens: r.tokens,
            })
            .collect(),
    )
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    read_jsonl(path)
}

pub fn load_corpus(examples_path: &Path, knowledge_path: &Path) -> Result<CorpusBundle> {
    let knowledge = load_knowledge(knowledge_path)?;
    let examples = load_examples(examples_path)?;
    let scenario = examples_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CorpusBundle::new(examples, knowledge, scenario)
}

pub fn write_corpus(bundle: &CorpusBundle, examples_path: &Path, knowledge_path: &Path) -> Result<()> {
    write_jsonl(examples_path, &bundle.examples)?;
    write_jsonl(
        knowledge_path,
        bundle.knowledge.slots().iter().map(|s| KnowledgeRecord {
            slot_id: s.id.clone(),
            tokens: s.tokens.clone(),
        }),
    )
}

/// Example indices of one cross-validation fold. Each list is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Share of each fold's training portion held out for validation.
pub const VALIDATION_SHARE: f64 = 0.1;

/// Stratified k-fold split. Positives and negatives are shuffled separately
/// and dealt round-robin, the negatives continuing the positives' fold
/// counter so fold sizes differ by at most one. A stratified validation set
/// is then carved from each fold's training portion.
pub fn kfold_split(bundle: &CorpusBundle, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let labels: Vec<usize> = bundle.examples.iter().map(|e| e.label).collect();
    kfold_split_labels(&labels, k, seed)
}

pub fn kfold_split_labels(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k must be at least 2, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    if pos.len() < k {
        return Err(Error::data(format!(
            "{} positive examples cannot fill {k} stratified folds; use a smaller k",
            pos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0usize; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        assignment[i] = slot % k;
    }
    let folds = (0..k)
        .map(|f| {
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
            let mut train_pos: Vec<usize> = (0..labels.len())
                .filter(|&i| assignment[i] != f && labels[i] == 1)
                .collect();
            let mut train_neg: Vec<usize> = (0..labels.len())
                .filter(|&i| assignment[i] != f && labels[i] != 1)
                .collect();
            let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, f as u64));
            train_pos.shuffle(&mut vrng);
            train_neg.shuffle(&mut vrng);
            let mut n_pos = (train_pos.len() as f64 * VALIDATION_SHARE).round() as usize;
            if n_pos == 0 && train_pos.len() >= 2 {
                n_pos = 1;
            }
            let n_neg = (train_neg.len() as f64 * VALIDATION_SHARE).round() as usize;
            let mut validation: Vec<usize> = train_pos[..n_pos].iter().chain(&train_neg[..n_neg]).copied().collect();
            let mut train: Vec<usize> = train_pos[n_pos..].iter().chain(&train_neg[n_neg..]).copied().collect();
            validation.sort_unstable();
            train.sort_unstable();
            Fold {
                index: f,
                train,
                validation,
                test,
            }
        })
        .collect();
    Ok(folds)
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub slots: usize,
    pub positives: usize,
    pub negatives: usize,
    pub vocab_size: usize,
    /// Probability of replacing each example token by a random vocabulary token.
    pub noise: f64,
    pub seed: u64,
    pub slot_length: usize,
    pub fillers: usize,
    /// Filler tokens added to every example.
    pub filler_tokens: usize,
    pub negative_length: usize,
    /// Upper bound on targets per positive, capped at `slots`.
    pub max_targets: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            slots: 10,
            positives: 50,
            negatives: 950,
            vocab_size: 200,
            noise: 0.0,
            seed: 0,
            slot_length: 6,
            fillers: 20,
            filler_tokens: 3,
            negative_length: 6,
            max_targets: 2,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.positives == 0 || self.slot_length == 0 || self.negative_length == 0 {
            return Err(Error::config(
                "slots, positives, slot_length and negative_length must be positive",
            ));
        }
        if self.max_targets == 0 {
            return Err(Error::config("max_targets must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise must lie in [0, 1), got {}", self.noise)));
        }
        if self.filler_tokens > 0 && self.fillers == 0 {
            return Err(Error::config("filler_tokens needs a non-empty filler pool"));
        }
        let needed = self.slots * self.slot_length + self.fillers + self.negative_length;
        if self.vocab_size < needed {
            return Err(Error::config(format!(
                "vocab_size {} is too small for disjoint pools; need at least {needed}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Generates a corpus where each knowledge slot is a token template and each
/// positive paraphrases one or more slots. Slot, filler and negative tokens
/// come from disjoint pools.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CorpusBundle> {
    spec.validate()?;
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:04}")).collect();
    let slot_pool = spec.slots * spec.slot_length;
    let fillers = &vocab[slot_pool..slot_pool + spec.fillers];
    let negatives_pool = &vocab[slot_pool + spec.fillers..];
    let width = spec.slots.to_string().len();
    let slots: Vec<MemorySlot> = (0..spec.slots)
        .map(|i| MemorySlot {
            id: format!("s{i:0width$}"),
            tokens: vocab[i * spec.slot_length..(i + 1) * spec.slot_length].to_vec(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.positives + spec.negatives);
    let keep = spec.slot_length.div_ceil(2).max(1);
    for _ in 0..spec.positives {
        let n_targets = rng.random_range(1..=spec.max_targets.min(spec.slots));
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, spec.slots, n_targets).into_vec();
        chosen.sort_unstable();
        let mut tokens = Vec::new();
        for &s in &chosen {
            let n = rng.random_range(keep..=spec.slot_length);
            tokens.extend(slots[s].tokens.choose_multiple(&mut rng, n).cloned());
        }
        tokens.extend((0..spec.filler_tokens).map(|_| fillers.choose(&mut rng).expect("non-empty").clone()));
        examples.push((
            1,
            tokens,
            chosen.iter().map(|&s| slots[s].id.clone()).collect::<Vec<_>>(),
        ));
    }
    for _ in 0..spec.negatives {
        let mut tokens: Vec<String> = (0..spec.negative_length)
            .map(|_| negatives_pool.choose(&mut rng).expect("non-empty").clone())
            .collect();
        tokens.extend((0..spec.filler_tokens).map(|_| fillers.choose(&mut rng).expect("non-empty").clone()));
        examples.push((0, tokens, Vec::new()));
    }
    examples.shuffle(&mut rng);
    let width = (examples.len().max(1) - 1).to_string().len();
    let examples = examples
        .into_iter()
        .enumerate()
        .map(|(i, (label, mut tokens, targets))| {
            tokens.shuffle(&mut rng);
            for t in tokens.iter_mut() {
                if spec.noise > 0.0 && rng.random::<f64>() < spec.noise {
                    *t = vocab.choose(&mut rng).expect("non-empty").clone();
                }
            }
            Example {
                id: format!("e{i:0width$}"),
                tokens,
                label,
                targets,
                topic: None,
            }
        })
        .collect();
    CorpusBundle::new(examples, KnowledgeBase::new(slots)?, "synthetic")
}

/// Mean fraction of an example's tokens found in each slot, split into
/// target and non-target slots. Averages over annotated positives.
pub fn target_overlap(bundle: &CorpusBundle) -> (f64, f64) {
    let slot_sets: Vec<HashSet<&str>> = bundle
        .knowledge
        .slots()
        .iter()
        .map(|s| s.tokens.iter().map(String::as_str).collect())
        .collect();
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for ex in bundle.examples.iter().filter(|e| e.label == 1 && !e.targets.is_empty()) {
        let targets: HashSet<usize> = bundle.target_indices(ex).into_iter().collect();
        for (i, set) in slot_sets.iter().enumerate() {
            let overlap = ex.tokens.iter().filter(|t| set.contains(t.as_str())).count() as f64 / ex.tokens.len() as f64;
            if targets.contains(&i) {
                on += overlap;
                n_on += 1;
            } else {
                off += overlap;
                n_off += 1;
            }
        }
    }
    (on / n_on.max(1) as f64, off / n_off.max(1) as f64)
}

/// Number of examples per label in `indices`.
pub fn label_counts(bundle: &CorpusBundle, indices: &[usize]) -> HashMap<usize, usize> {
    let mut counts = HashMap::new();
    for &i in indices {
        *counts.entry(bundle.examples[i].label).or_default() += 1;
    }
    counts
}
