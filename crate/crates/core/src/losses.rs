//! Classification cross-entropy, the strong-supervision margin penalty and
//! their sum.
//!
//! Each loss exists twice: a plain function over already computed
//! probabilities/attentions, and a graph builder that produces the same
//! quantity as a differentiable node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CompGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Smallest probability fed to `ln` by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Strong supervision settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsConfig {
    /// Required attention gap between target and non-target slots, in `(0, 1]`.
    pub gamma: f64,
    pub enabled: bool,
}

impl SsConfig {
    pub fn new(gamma: f64, enabled: bool) -> Result<Self> {
        let cfg = Self { gamma, enabled };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for SsConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            enabled: true,
        }
    }
}

/// Target and non-target positions of one example within the active memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetAnnotation {
    /// Positions (into the active memory) of annotated target slots.
    pub positive: Vec<usize>,
    /// Every other active position.
    pub negative: Vec<usize>,
}

impl TargetAnnotation {
    /// Splits `active` (global slot ids, in memory order) into target and
    /// non-target positions. Targets missing from `active` are dropped.
    pub fn against(targets: &[usize], active: &[usize]) -> Self {
        let (positive, negative) = (0..active.len()).partition(|&i| targets.contains(&active[i]));
        Self { positive, negative }
    }

    /// An example only constrains the memory when both sides are present.
    pub fn is_informative(&self) -> bool {
        !self.positive.is_empty() && !self.negative.is_empty()
    }
}

/// Mean negative log-likelihood of the gold classes.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::data(format!(
            "cross-entropy over {} predictions and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!("probabilities sum to {sum}, not 1")));
        }
        let py = *p
            .get(y)
            .ok_or_else(|| Error::data(format!("label {y} outside {} classes", p.len())))?;
        if py < PROB_FLOOR {
            log::warn!("gold-class probability {py} clamped to {PROB_FLOOR}");
        }
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Hinge penalty pushing target-slot attentions above non-target ones by
/// `gamma`, averaged over pairs within an example and over all `N` examples.
///
/// `attention[n]` holds `σ(s(q_n, m))` for every active slot. Examples with
/// no target or no non-target in the active memory contribute zero but still
/// count towards `N`.
pub fn strong_supervision_loss(attention: &[Vec<f64>], targets: &[TargetAnnotation], cfg: &SsConfig) -> f64 {
    if attention.is_empty() || !cfg.enabled {
        return 0.0;
    }
    let mut total = 0.0;
    for (a, ann) in attention.iter().zip(targets) {
        if !ann.is_informative() {
            continue;
        }
        let mut sum = 0.0;
        for &p in &ann.positive {
            for &q in &ann.negative {
                sum += (cfg.gamma - a[p] + a[q]).max(0.0);
            }
        }
        total += sum / (ann.positive.len() * ann.negative.len()) as f64;
    }
    total / attention.len() as f64
}

/// `ce + ss`, with `ss` absent under weak supervision.
pub fn total_loss(ce: f64, ss: Option<f64>) -> f64 {
    ce + ss.unwrap_or(0.0)
}

/// Per-example and mean cross-entropy nodes for row-wise log-probabilities
/// `[N, C]`. Returns `(mean [1], per_example [N, 1])`.
pub fn cross_entropy_node(
    graph: &mut CompGraph,
    log_probs: NodeId,
    labels: &[usize],
    num_classes: usize,
) -> Result<(NodeId, NodeId)> {
    if labels.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut onehot = DenseTensor::zeros(&[labels.len(), num_classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::data(format!("label {y} outside {num_classes} classes")));
        }
        onehot.data_mut()[i * num_classes + y] = 1.0;
    }
    let onehot = graph.constant(onehot);
    let picked = graph.mul(log_probs, onehot);
    let rows = graph.row_sum(picked);
    let per_example = graph.scale(rows, -1.0);
    let mean = graph.reduce_mean(per_example);
    Ok((mean, per_example))
}

/// Differentiable [`strong_supervision_loss`] over an `[N, S]` attention node.
pub fn strong_supervision_node(
    graph: &mut CompGraph,
    attention: NodeId,
    slots: usize,
    targets: &[TargetAnnotation],
    cfg: &SsConfig,
) -> NodeId {
    let n = targets.len().max(1) as f64;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut weights = Vec::new();
    for (row, ann) in targets.iter().enumerate() {
        if !ann.is_informative() {
            continue;
        }
        let w = 1.0 / (n * (ann.positive.len() * ann.negative.len()) as f64);
        for &p in &ann.positive {
            for &q in &ann.negative {
                pos.push(row * slots + p);
                neg.push(row * slots + q);
                weights.push(w);
            }
        }
    }
    if !cfg.enabled || pos.is_empty() {
        return graph.constant(DenseTensor::scalar(0.0));
    }
    let count = weights.len();
    let a_pos = graph.gather(attention, pos);
    let a_neg = graph.gather(attention, neg);
    let gap = graph.sub(a_neg, a_pos);
    let shifted = graph.add_scalar(gap, cfg.gamma);
    let hinge = graph.relu(shifted);
    let w = graph.constant(DenseTensor::new(vec![count], weights).expect("one weight per pair"));
    let weighted = graph.mul(hinge, w);
    graph.reduce_sum(weighted)
}
