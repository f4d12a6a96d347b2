//! Priority-based memory sampling.
//!
//! Each slot carries a priority `p = (w + ε)^α`, where `w` is an importance
//! weight estimated from the batch the slot was last sampled in. A batch
//! attends over `K` slots drawn without replacement in proportion to the
//! normalized priorities. With `α = 0` every priority is 1 and sampling is
//! uniform.
//!
//! Importance comes from one of two reductions over the batch attention
//! matrix, restricted to positive examples when negative filtering is on:
//!
//! * attention: mean attention the slot received;
//! * loss gain: mean of attention times `exp(CE without memory − CE with memory)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, ForwardOptions};
use crate::error::{Error, Result};
use crate::losses::SsConfig;
use crate::model::{Batch, ForwardResult, GraphOptions, KnowledgeBase, MemoryModel};
use crate::seed::derive_seed;
use crate::tensor::DenseTensor;

/// Label of the class the knowledge is about.
pub const POSITIVE_CLASS: usize = 1;

/// Bound applied to the loss difference before exponentiation.
pub const GAIN_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Fixed uniform priorities.
    Uniform,
    PriorityAttention,
    PriorityLossGain,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "priority-attention" => Ok(Self::PriorityAttention),
            "priority-loss-gain" => Ok(Self::PriorityLossGain),
            other => Err(Error::config(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::PriorityAttention => "priority-attention",
            Self::PriorityLossGain => "priority-loss-gain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    /// Number of slots per batch.
    pub sample_size: usize,
    pub epsilon: f64,
    pub alpha: f64,
    /// Only positive examples contribute to importance.
    pub filter_negatives: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::PriorityLossGain,
            sample_size: 5,
            epsilon: 0.01,
            alpha: 0.6,
            filter_negatives: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, memory_size: usize) -> Result<()> {
        if self.sample_size == 0 || self.sample_size > memory_size {
            return Err(Error::config(format!(
                "sample size {} must lie in [1, {memory_size}]",
                self.sample_size
            )));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-slot priorities and the sampling distribution derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityState {
    priorities: Vec<f64>,
    distribution: Vec<f64>,
    /// Number of priority updates applied.
    pub updates: u64,
}

impl PriorityState {
    /// All priorities equal to 1.
    pub fn uniform(memory_size: usize) -> Self {
        Self::from_priorities(vec![1.0; memory_size]).expect("positive priorities")
    }

    pub fn from_priorities(priorities: Vec<f64>) -> Result<Self> {
        if priorities.is_empty() || priorities.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::data("priorities must be positive and finite"));
        }
        let mut state = Self {
            distribution: vec![0.0; priorities.len()],
            priorities,
            updates: 0,
        };
        state.renormalize();
        Ok(state)
    }

    fn renormalize(&mut self) {
        let total: f64 = self.priorities.iter().sum();
        for (d, p) in self.distribution.iter_mut().zip(&self.priorities) {
            *d = p / total;
        }
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    pub fn distribution(&self) -> &[f64] {
        &self.distribution
    }

    pub fn len(&self) -> usize {
        self.priorities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priorities.is_empty()
    }

    /// Overwrites the priorities of `slots` with `(w + ε)^α` and renormalizes.
    /// Other slots keep their previous priority.
    pub fn update(&mut self, slots: &[usize], importance: &[f64], cfg: &SamplerConfig) -> Result<()> {
        if slots.len() != importance.len() {
            return Err(Error::config("one importance weight per sampled slot expected"));
        }
        let raw = priority_from_importance(importance, cfg)?.raw;
        for (&slot, p) in slots.iter().zip(raw) {
            self.priorities[slot] = p;
        }
        self.renormalize();
        self.updates += 1;
        Ok(())
    }
}

/// Raw priorities and their normalized distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Priorities {
    pub raw: Vec<f64>,
    pub distribution: Vec<f64>,
}

/// `p_i = (w_i + ε)^α`, normalized.
pub fn priority_from_importance(importance: &[f64], cfg: &SamplerConfig) -> Result<Priorities> {
    if importance.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::data("importance weights must be finite and non-negative"));
    }
    let raw: Vec<f64> = importance.iter().map(|w| (w + cfg.epsilon).powf(cfg.alpha)).collect();
    let total: f64 = raw.iter().sum();
    let distribution = raw.iter().map(|p| p / total).collect();
    Ok(Priorities { raw, distribution })
}

fn contributing_rows(labels: &[usize], cfg: &SamplerConfig) -> Vec<usize> {
    (0..labels.len())
        .filter(|&j| !cfg.filter_negatives || labels[j] == POSITIVE_CLASS)
        .collect()
}

/// Masked mean of the attention each sampled slot received.
///
/// Returns `None` when no example passes the mask, in which case priorities
/// must not be touched.
pub fn attention_importance(attention: &DenseTensor, labels: &[usize], cfg: &SamplerConfig) -> Option<Vec<f64>> {
    let ones = vec![1.0; labels.len()];
    weighted_importance(attention, labels, &ones, cfg)
}

/// Masked mean of attention weighted by `exp(CE(x) − CE(x | M̄))`.
pub fn loss_gain_importance(
    attention: &DenseTensor,
    ce_without_memory: &[f64],
    ce_with_memory: &[f64],
    labels: &[usize],
    cfg: &SamplerConfig,
) -> Option<Vec<f64>> {
    let gains: Vec<f64> = ce_without_memory
        .iter()
        .zip(ce_with_memory)
        .map(|(free, with)| (free - with).clamp(-GAIN_CLAMP, GAIN_CLAMP).exp())
        .collect();
    weighted_importance(attention, labels, &gains, cfg)
}

fn weighted_importance(
    attention: &DenseTensor,
    labels: &[usize],
    weights: &[f64],
    cfg: &SamplerConfig,
) -> Option<Vec<f64>> {
    let rows = contributing_rows(labels, cfg);
    if rows.is_empty() {
        return None;
    }
    let mut w = vec![0.0; attention.cols()];
    for &j in &rows {
        for (acc, a) in w.iter_mut().zip(attention.row_slice(j)) {
            *acc += a * weights[j];
        }
    }
    let n = rows.len() as f64;
    Some(w.into_iter().map(|v| v / n).collect())
}

/// Draws `k` distinct slots, each draw proportional to the remaining
/// probability mass. The result is sorted by slot index.
pub fn sample_memory<R: Rng + ?Sized>(state: &PriorityState, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = state.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot sample {k} of {n} slots")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut weights = state.distribution().to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        // Rounding can leave `target` past the last positive weight; the
        // last positive slot is then the right pick.
        let i = choice.expect("k <= n leaves positive mass");
        picked.push(i);
        weights[i] = 0.0;
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Optimizer pieces threaded through a training step.
#[derive(Debug)]
pub struct StepContext<'a> {
    pub optimizer: &'a Adam,
    pub adam_state: &'a mut AdamState,
    pub ss: Option<SsConfig>,
    /// Seed for this step's dropout masks.
    pub dropout_seed: u64,
}

/// Outcome of one sampled training step.
#[derive(Debug, Clone)]
pub struct SampledStep {
    pub sampled: Vec<usize>,
    pub forward: ForwardResult,
    /// Whether the priority state changed.
    pub priorities_updated: bool,
}

/// One minibatch step: sample `M̄` from the current distribution, update
/// the model on `L(x | M̄)`, then refresh the priorities of the sampled
/// slots from this batch's importance weights.
pub fn training_step_with_sampling<R: Rng + ?Sized>(
    model: &mut MemoryModel,
    kb: &KnowledgeBase,
    batch: &Batch,
    state: &mut PriorityState,
    cfg: &SamplerConfig,
    ctx: StepContext<'_>,
    rng: &mut R,
) -> Result<SampledStep> {
    let sampled = sample_memory(state, cfg.sample_size, rng)?;
    let memory = model.active_memory(kb, &sampled);
    let opts = GraphOptions {
        ss: ctx.ss,
        zero_summary: false,
        memory_free_loss: cfg.strategy == SamplingStrategy::PriorityLossGain,
    };
    let forward = model.train_step(batch, &memory, &opts, ctx.optimizer, ctx.adam_state, ctx.dropout_seed)?;
    let importance = match cfg.strategy {
        SamplingStrategy::Uniform => None,
        SamplingStrategy::PriorityAttention => attention_importance(&forward.attention, &batch.labels, cfg),
        SamplingStrategy::PriorityLossGain => loss_gain_importance(
            &forward.attention,
            forward.ce_free_per_example.as_deref().expect("requested above"),
            &forward.ce_per_example,
            &batch.labels,
            cfg,
        ),
    };
    let priorities_updated = match importance {
        Some(w) => {
            state.update(&sampled, &w, cfg)?;
            true
        }
        None => false,
    };
    Ok(SampledStep {
        sampled,
        forward,
        priorities_updated,
    })
}

/// Model output for one example under one sampled memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutput {
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    /// Global ids of the slots attended over.
    pub slot_ids: Vec<usize>,
    /// Attention per entry of `slot_ids`.
    pub attention: Vec<f64>,
}

/// Predictions of one inference repetition, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRun {
    pub seed: u64,
    pub outputs: Vec<ExampleOutput>,
}

impl InferenceRun {
    pub fn predictions(&self) -> Vec<usize> {
        self.outputs.iter().map(|o| o.predicted).collect()
    }
}

/// Runs inference `repetitions` times, each batch attending over a memory
/// freshly sampled from the frozen distribution. Repetition `r` uses the
/// seed `derive_seed(cfg.seed, r)`.
pub fn inference_with_sampling(
    model: &MemoryModel,
    kb: &KnowledgeBase,
    batches: &[Batch],
    state: &PriorityState,
    cfg: &SamplerConfig,
    repetitions: usize,
) -> Result<Vec<InferenceRun>> {
    cfg.validate(kb.len())?;
    (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.seed, r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut outputs = Vec::new();
            for batch in batches {
                let sampled = sample_memory(state, cfg.sample_size, &mut rng)?;
                let memory = model.active_memory(kb, &sampled);
                let fwd = model.forward(batch, &memory, &GraphOptions::default(), ForwardOptions::inference())?;
                outputs.extend(example_outputs(&fwd));
            }
            Ok(InferenceRun { seed, outputs })
        })
        .collect()
}

/// Splits a batch forward result into per-example records.
pub fn example_outputs(fwd: &ForwardResult) -> Vec<ExampleOutput> {
    let preds = fwd.predictions();
    (0..fwd.probabilities.rows())
        .map(|r| ExampleOutput {
            predicted: preds[r],
            probabilities: fwd.probabilities.row_slice(r).to_vec(),
            slot_ids: fwd.slot_ids.clone(),
            attention: fwd.attention.row_slice(r).to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests;
