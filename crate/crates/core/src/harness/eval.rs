use serde::Serialize;

use super::{eval_seed, make_batches, MemoryMode, RunConfig};
use crate::autodiff::ForwardOptions;
use crate::corpus::{CorpusBundle, Fold};
use crate::error::{Error, Result};
use crate::metrics::{compute_memory_report, f1_report, threshold_sweep, AttentionTrace, F1Report, MemoryReport};
use crate::model::{Batch, GraphOptions, KnowledgeBase, MemoryModel};
use crate::sampler::{example_outputs, inference_with_sampling, InferenceRun, PriorityState};

/// Inference over `batches`. Full-memory mode yields a single run; sampled
/// mode yields `repetitions` runs drawn from the frozen priorities.
pub fn predict(
    model: &MemoryModel,
    kb: &KnowledgeBase,
    batches: &[Batch],
    state: &PriorityState,
    config: &RunConfig,
    seed: u64,
    repetitions: usize,
) -> Result<Vec<InferenceRun>> {
    match config.memory {
        MemoryMode::Full => {
            let memory = model.full_memory(kb);
            let mut outputs = Vec::new();
            for batch in batches {
                let fwd = model.forward(batch, &memory, &GraphOptions::default(), ForwardOptions::inference())?;
                outputs.extend(example_outputs(&fwd));
            }
            Ok(vec![InferenceRun { seed, outputs }])
        }
        MemoryMode::Sampled => {
            inference_with_sampling(model, kb, batches, state, &config.sampler_config(seed), repetitions)
        }
    }
}

/// Metrics of one inference pass over a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub seed: u64,
    pub f1: F1Report,
    /// Memory metrics over positive examples, absent when there are none.
    pub memory: Option<MemoryReport>,
    /// One trace per test example, in split order.
    pub traces: Vec<AttentionTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub repetitions: Vec<RepetitionResult>,
    /// Mean over repetitions.
    pub macro_f1: f64,
    /// Mean over repetitions.
    pub memory: Option<MemoryReport>,
}

impl FoldEvaluation {
    /// Traces of positive examples from every repetition.
    pub fn positive_traces(&self) -> Vec<AttentionTrace> {
        self.repetitions
            .iter()
            .flat_map(|r| r.traces.iter().filter(|t| t.gold == 1).cloned())
            .collect()
    }
}

/// Scores a trained model on `fold.test`.
pub fn evaluate(
    model: &MemoryModel,
    state: &PriorityState,
    bundle: &CorpusBundle,
    fold: &Fold,
    config: &RunConfig,
) -> Result<FoldEvaluation> {
    if fold.test.is_empty() {
        return Err(Error::data(format!("fold {} has an empty test split", fold.index)));
    }
    let kb = &bundle.knowledge;
    let batches = make_batches(model, bundle, &fold.test, config.batch_size);
    let runs = predict(
        model,
        kb,
        &batches,
        state,
        config,
        eval_seed(config.seed, fold.index),
        config.repetitions,
    )?;
    let gold: Vec<usize> = fold.test.iter().map(|&i| bundle.examples[i].label).collect();
    let mut repetitions = Vec::with_capacity(runs.len());
    for run in runs {
        let traces: Vec<AttentionTrace> = fold
            .test
            .iter()
            .zip(&run.outputs)
            .map(|(&i, o)| {
                let ex = &bundle.examples[i];
                AttentionTrace {
                    id: ex.id.clone(),
                    gold: ex.label,
                    pred: o.predicted,
                    targets: ex.targets.clone(),
                    attention: o
                        .slot_ids
                        .iter()
                        .zip(&o.attention)
                        .map(|(&s, &a)| (kb.slot(s).id.clone(), a))
                        .collect(),
                }
            })
            .collect();
        let f1 = f1_report(&gold, &run.predictions())?;
        let positives: Vec<AttentionTrace> = traces.iter().filter(|t| t.gold == 1).cloned().collect();
        let memory = if positives.is_empty() {
            None
        } else {
            Some(compute_memory_report(&positives, config.delta, &config.ks)?)
        };
        repetitions.push(RepetitionResult {
            seed: run.seed,
            f1,
            memory,
            traces,
        });
    }
    let macro_f1 = repetitions.iter().map(|r| r.f1.macro_f1).sum::<f64>() / repetitions.len() as f64;
    let reports: Vec<MemoryReport> = repetitions.iter().filter_map(|r| r.memory.clone()).collect();
    let memory = if reports.is_empty() {
        None
    } else {
        Some(MemoryReport::mean(&reports)?)
    };
    Ok(FoldEvaluation {
        fold: fold.index,
        repetitions,
        macro_f1,
        memory,
    })
}

/// Memory metrics of one fold's positive traces at each threshold,
/// averaged over repetitions.
pub fn sweep(evaluation: &FoldEvaluation, deltas: &[f64], ks: &[usize]) -> Result<Vec<MemoryReport>> {
    let per_rep: Vec<Vec<MemoryReport>> = evaluation
        .repetitions
        .iter()
        .map(|r| {
            let positives: Vec<AttentionTrace> = r.traces.iter().filter(|t| t.gold == 1).cloned().collect();
            threshold_sweep(&positives, deltas, ks)
        })
        .collect::<Result<_>>()?;
    (0..deltas.len())
        .map(|d| MemoryReport::mean(&per_rep.iter().map(|r| r[d].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Cross-fold summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub folds: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    /// Mean of per-fold memory reports.
    pub memory: Option<MemoryReport>,
}

pub fn aggregate(evaluations: &[FoldEvaluation]) -> Result<Aggregate> {
    if evaluations.is_empty() {
        return Err(Error::data("nothing to aggregate"));
    }
    let n = evaluations.len() as f64;
    let mean = evaluations.iter().map(|e| e.macro_f1).sum::<f64>() / n;
    let var = evaluations.iter().map(|e| (e.macro_f1 - mean).powi(2)).sum::<f64>() / n;
    let reports: Vec<MemoryReport> = evaluations.iter().filter_map(|e| e.memory.clone()).collect();
    Ok(Aggregate {
        folds: evaluations.len(),
        macro_f1_mean: mean,
        macro_f1_std: var.sqrt(),
        memory: if reports.is_empty() {
            None
        } else {
            Some(MemoryReport::mean(&reports)?)
        },
    })
}
