//! The memory-augmented classifier.
//!
//! One memory hop over a (possibly sampled) set of knowledge slots:
//!
//! 1. the input and every active slot are mean-pooled by the shared encoder;
//! 2. an MLP with one hidden layer scores each `(query, slot)` pair;
//! 3. scores go through an independent sigmoid per slot (no normalization
//!    across slots, since several slots may be relevant at once);
//! 4. the attention-weighted sum of slot embeddings is concatenated to the
//!    query and fed to a softmax classification head.
//!
//! The lookup layer is a single dense layer over `[query ⊕ slot]`. Its weight
//! matrix is stored as two `[d, h]` halves so the query and slot projections
//! are computed once per batch instead of once per pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{forward_eval, Adam, AdamState, Bindings, CompGraph, ForwardOptions, NodeId, ParamStore};
use crate::encoder::{encode_batch, EncoderParams, Vocabulary, EMBEDDING_PARAM};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_node, strong_supervision_node, SsConfig, TargetAnnotation};
use crate::tensor::DenseTensor;

pub const LOOKUP_W_QUERY: &str = "lookup.w_query";
pub const LOOKUP_W_SLOT: &str = "lookup.w_slot";
pub const LOOKUP_B_HIDDEN: &str = "lookup.b_hidden";
pub const LOOKUP_W_OUT: &str = "lookup.w_out";
pub const LOOKUP_B_OUT: &str = "lookup.b_out";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Dropout mask key of the classification head input.
const HEAD_DROPOUT_KEY: u64 = 1;

/// One unit of background knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub id: String,
    pub tokens: Vec<String>,
}

/// The external memory. Slot `i` has dense index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    slots: Vec<MemorySlot>,
}

impl KnowledgeBase {
    pub fn new(slots: Vec<MemorySlot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::data("knowledge base has no slots"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &slots {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::data(format!("duplicate slot id `{}`", s.id)));
            }
            if s.tokens.is_empty() {
                return Err(Error::data(format!("slot `{}` has no tokens", s.id)));
            }
        }
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> &MemorySlot {
        &self.slots[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.id == id)
    }

    /// SHA-256 over slot ids and tokens, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.slots {
            h.update(s.id.as_bytes());
            h.update([1u8]);
            for t in &s.tokens {
                h.update(t.as_bytes());
                h.update([0u8]);
            }
            h.update([2u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            hidden_units: 64,
            num_classes: 2,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be at least 1"));
        }
        if !(32..=512).contains(&self.hidden_units) {
            return Err(Error::config(format!(
                "hidden_units must lie in [32, 512], got {}",
                self.hidden_units
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Encoded examples of one batch.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    /// Global slot indices annotated as targets, per example.
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The slots a forward pass attends over.
#[derive(Debug, Clone)]
pub struct ActiveMemory {
    /// Global slot indices, in the order they appear in attention rows.
    pub slot_ids: Vec<usize>,
    pub token_ids: Vec<Vec<usize>>,
}

impl ActiveMemory {
    pub fn len(&self) -> usize {
        self.slot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_ids.is_empty()
    }
}

/// What to put in a model graph besides the classification path.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphOptions {
    /// Adds the strong-supervision term to the loss.
    pub ss: Option<SsConfig>,
    /// Replaces the memory summary by zeros.
    pub zero_summary: bool,
    /// Also computes per-example cross-entropy with a zeroed summary
    /// (same parameters and dropout mask), for loss-gain priorities.
    pub memory_free_loss: bool,
}

/// Node handles of a built model graph.
#[derive(Debug)]
pub struct ModelGraph {
    pub graph: CompGraph,
    pub query: NodeId,
    pub slots: NodeId,
    pub similarities: NodeId,
    pub attention: NodeId,
    pub summary: NodeId,
    pub log_probs: NodeId,
    pub ce: NodeId,
    pub ce_per_example: NodeId,
    pub ce_free_per_example: Option<NodeId>,
    pub ss: Option<NodeId>,
    pub loss: NodeId,
}

/// Values of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Global slot index of each attention column.
    pub slot_ids: Vec<usize>,
    /// `[B, d]`.
    pub query: DenseTensor,
    /// `[B, |M̄|]` lookup scores.
    pub similarities: DenseTensor,
    /// `[B, |M̄|]`, elementwise sigmoid of `similarities`.
    pub attention: DenseTensor,
    /// `[B, d]`.
    pub summary: DenseTensor,
    /// `[B, C]` class probabilities.
    pub probabilities: DenseTensor,
    pub ce_per_example: Vec<f64>,
    pub ce_free_per_example: Option<Vec<f64>>,
    pub ce: f64,
    pub ss: Option<f64>,
    pub loss: f64,
}

impl ForwardResult {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probabilities.rows())
            .map(|r| argmax(self.probabilities.row_slice(r)))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores every `(query, slot)` pair: `w_outᵀ relu(W [q ⊕ m] + b) + b_out`.
///
/// `query` is `[B, d]`, `slots` is `[S, d]`; the result is `[B, S]`.
pub fn memory_lookup(graph: &mut CompGraph, query: NodeId, slots: NodeId, batch: usize, memory: usize) -> NodeId {
    let wq = graph.param(LOOKUP_W_QUERY);
    let wm = graph.param(LOOKUP_W_SLOT);
    let b1 = graph.param(LOOKUP_B_HIDDEN);
    let w2 = graph.param(LOOKUP_W_OUT);
    let b2 = graph.param(LOOKUP_B_OUT);
    let q_proj = graph.matmul(query, wq);
    let m_proj = graph.matmul(slots, wm);
    // Row b * S + s pairs query b with slot s.
    let q_pairs = graph.repeat_rows(q_proj, memory);
    let m_pairs = graph.tile_rows(m_proj, batch);
    let pre = graph.add(q_pairs, m_pairs);
    let pre = graph.add_bias(pre, b1);
    graph.set_label(pre, "lookup.pre_activation");
    let hidden = graph.relu(pre);
    let scores = graph.matmul(hidden, w2);
    let scores = graph.add_bias(scores, b2);
    let sims = graph.reshape(scores, vec![batch, memory]);
    graph.set_label(sims, "similarities");
    sims
}

/// Independent sigmoid per slot.
pub fn attention_scores(graph: &mut CompGraph, similarities: NodeId) -> NodeId {
    let a = graph.sigmoid(similarities);
    graph.set_label(a, "attention");
    a
}

/// `Σ_i a_i · m_i` for every batch row: `[B, S] · [S, d]`.
pub fn memory_summary(graph: &mut CompGraph, attention: NodeId, slots: NodeId) -> NodeId {
    let s = graph.matmul(attention, slots);
    graph.set_label(s, "summary");
    s
}

/// `log_softmax(head(dropout([query ⊕ summary])))`, shape `[B, C]`.
pub fn reason_and_classify(graph: &mut CompGraph, query: NodeId, summary: NodeId, dropout: f64) -> NodeId {
    let w = graph.param(HEAD_W);
    let b = graph.param(HEAD_B);
    let joined = graph.concat_cols(query, summary);
    let dropped = graph.dropout(joined, dropout, HEAD_DROPOUT_KEY);
    let logits = graph.matmul(dropped, w);
    let logits = graph.add_bias(logits, b);
    let lp = graph.log_softmax(logits);
    graph.set_label(lp, "log_probs");
    lp
}

/// Model configuration, vocabulary and trained parameters.
#[derive(Debug, Clone)]
pub struct MemoryModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> DenseTensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    DenseTensor::new(vec![rows, cols], data).expect("sized")
}

impl MemoryModel {
    /// Fresh model with seeded random parameters.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (config.embedding_dim, config.hidden_units, config.num_classes);
        let mut params = ParamStore::new();
        params.insert(
            EMBEDDING_PARAM,
            EncoderParams::init(vocab.len(), d, &mut rng)?.embedding,
        );
        params.insert(LOOKUP_W_QUERY, xavier(&mut rng, d, h, 2 * d, h));
        params.insert(LOOKUP_W_SLOT, xavier(&mut rng, d, h, 2 * d, h));
        params.insert(LOOKUP_B_HIDDEN, DenseTensor::zeros(&[1, h]));
        params.insert(LOOKUP_W_OUT, xavier(&mut rng, h, 1, h, 1));
        params.insert(LOOKUP_B_OUT, DenseTensor::zeros(&[1, 1]));
        params.insert(HEAD_W, xavier(&mut rng, 2 * d, c, 2 * d, c));
        params.insert(HEAD_B, DenseTensor::zeros(&[1, c]));
        Ok(Self { config, vocab, params })
    }

    /// Wraps existing parameters, checking every expected tensor is present
    /// with the right shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, h, c) = (config.embedding_dim, config.hidden_units, config.num_classes);
        let expected: [(&str, [usize; 2]); 8] = [
            (EMBEDDING_PARAM, [vocab.len(), d]),
            (LOOKUP_W_QUERY, [d, h]),
            (LOOKUP_W_SLOT, [d, h]),
            (LOOKUP_B_HIDDEN, [1, h]),
            (LOOKUP_W_OUT, [h, 1]),
            (LOOKUP_B_OUT, [1, 1]),
            (HEAD_W, [2 * d, c]),
            (HEAD_B, [1, c]),
        ];
        for (name, shape) in expected {
            match params.get(name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("parameter `{name}` missing"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::config("checkpoint carries unexpected parameters"));
        }
        Ok(Self { config, vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    /// Token ids of the given slots.
    pub fn active_memory(&self, kb: &KnowledgeBase, slot_ids: &[usize]) -> ActiveMemory {
        ActiveMemory {
            slot_ids: slot_ids.to_vec(),
            token_ids: slot_ids
                .iter()
                .map(|&i| self.vocab.encode(&kb.slot(i).tokens))
                .collect(),
        }
    }

    /// Every slot of `kb`, in order.
    pub fn full_memory(&self, kb: &KnowledgeBase) -> ActiveMemory {
        self.active_memory(kb, &(0..kb.len()).collect::<Vec<_>>())
    }

    pub fn build_graph(&self, batch: &Batch, memory: &ActiveMemory, opts: &GraphOptions) -> Result<ModelGraph> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if memory.is_empty() {
            return Err(Error::config("active memory has no slots"));
        }
        let (b, s, d) = (batch.len(), memory.len(), self.config.embedding_dim);
        let mut g = CompGraph::new();
        let table = g.param(EMBEDDING_PARAM);
        let query = encode_batch(&mut g, table, &batch.token_ids)?;
        g.set_label(query, "query");
        let slots = encode_batch(&mut g, table, &memory.token_ids)?;
        g.set_label(slots, "slots");
        let similarities = memory_lookup(&mut g, query, slots, b, s);
        let attention = attention_scores(&mut g, similarities);
        let summary = if opts.zero_summary {
            g.constant(DenseTensor::zeros(&[b, d]))
        } else {
            memory_summary(&mut g, attention, slots)
        };
        let log_probs = reason_and_classify(&mut g, query, summary, self.config.dropout);
        let (ce, ce_per_example) = cross_entropy_node(&mut g, log_probs, &batch.labels, self.config.num_classes)?;
        g.set_label(ce, "cross_entropy");

        let ce_free_per_example = if opts.memory_free_loss {
            let zeros = g.constant(DenseTensor::zeros(&[b, d]));
            let free_lp = reason_and_classify(&mut g, query, zeros, self.config.dropout);
            Some(cross_entropy_node(&mut g, free_lp, &batch.labels, self.config.num_classes)?.1)
        } else {
            None
        };

        let (ss, loss) = match opts.ss {
            Some(cfg) if cfg.enabled => {
                let anns: Vec<TargetAnnotation> = batch
                    .targets
                    .iter()
                    .map(|t| TargetAnnotation::against(t, &memory.slot_ids))
                    .collect();
                let ss = strong_supervision_node(&mut g, attention, s, &anns, &cfg);
                g.set_label(ss, "strong_supervision");
                let total = g.add(ce, ss);
                (Some(ss), total)
            }
            _ => (None, ce),
        };
        g.set_label(loss, "loss");
        Ok(ModelGraph {
            graph: g,
            query,
            slots,
            similarities,
            attention,
            summary,
            log_probs,
            ce,
            ce_per_example,
            ce_free_per_example,
            ss,
            loss,
        })
    }

    fn collect(mg: &ModelGraph, eval: &crate::autodiff::Evaluation<'_>, memory: &ActiveMemory) -> ForwardResult {
        ForwardResult {
            slot_ids: memory.slot_ids.clone(),
            query: eval.value(mg.query).clone(),
            similarities: eval.value(mg.similarities).clone(),
            attention: eval.value(mg.attention).clone(),
            summary: eval.value(mg.summary).clone(),
            probabilities: eval.value(mg.log_probs).map(f64::exp),
            ce_per_example: eval.value(mg.ce_per_example).data().to_vec(),
            ce_free_per_example: mg.ce_free_per_example.map(|n| eval.value(n).data().to_vec()),
            ce: eval.value(mg.ce).item(),
            ss: mg.ss.map(|n| eval.value(n).item()),
            loss: eval.value(mg.loss).item(),
        }
    }

    /// Forward pass only.
    pub fn forward(
        &self,
        batch: &Batch,
        memory: &ActiveMemory,
        opts: &GraphOptions,
        fwd: ForwardOptions,
    ) -> Result<ForwardResult> {
        let mg = self.build_graph(batch, memory, opts)?;
        let eval = forward_eval(&mg.graph, &Bindings::new(), &self.params, fwd)?;
        Ok(Self::collect(&mg, &eval, memory))
    }

    /// Forward, backward and one optimizer update. Returns the values seen
    /// before the update.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        memory: &ActiveMemory,
        opts: &GraphOptions,
        optimizer: &Adam,
        state: &mut AdamState,
        seed: u64,
    ) -> Result<ForwardResult> {
        let mg = self.build_graph(batch, memory, opts)?;
        let eval = forward_eval(
            &mg.graph,
            &Bindings::new(),
            &self.params,
            ForwardOptions::training(seed),
        )?;
        let result = Self::collect(&mg, &eval, memory);
        let grads = eval.backward(mg.loss)?;
        optimizer.step(&mut self.params, &grads, state)?;
        Ok(result)
    }

    /// Encodes examples for a forward pass.
    pub fn batch<'a, I>(&self, examples: I) -> Batch
    where
        I: IntoIterator<Item = (&'a [String], usize, &'a [usize])>,
    {
        let mut batch = Batch::default();
        for (tokens, label, targets) in examples {
            batch.token_ids.push(self.vocab.encode(tokens));
            batch.labels.push(label);
            batch.targets.push(targets.to_vec());
        }
        batch
    }
}
