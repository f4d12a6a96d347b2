//! Experiment orchestration: training with early stopping, multi-start,
//! evaluation over folds and checkpoints.

mod checkpoint;
mod config;
mod eval;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use config::{MemoryMode, RunConfig, Supervision};
pub use eval::{aggregate, evaluate, predict, sweep, Aggregate, FoldEvaluation, RepetitionResult};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, ParamStore};
use crate::corpus::{CorpusBundle, Fold};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::f1_report;
use crate::model::{Batch, GraphOptions, MemoryModel};
use crate::sampler::{training_step_with_sampling, PriorityState, StepContext};
use crate::seed::derive_seed;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Seed of restart `restart` on fold `fold`.
pub fn restart_seed(base: u64, fold: usize, restart: usize) -> u64 {
    derive_seed(derive_seed(base, fold as u64), 1000 + restart as u64)
}

/// Seed used to sample memories when evaluating fold `fold`.
pub fn eval_seed(base: u64, fold: usize) -> u64 {
    derive_seed(derive_seed(base, fold as u64), STREAM_EVAL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Patience => "patience",
            Self::MaxEpochs => "max_epochs",
        })
    }
}

/// Per-epoch record of a training run. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_f1: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_validation_f1(&self) -> f64 {
        self.validation_f1[self.best_epoch - 1]
    }
}

/// A trained model with the priorities learned alongside it.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    pub model: MemoryModel,
    pub priorities: PriorityState,
    pub history: TrainHistory,
}

/// Vocabulary over the training split plus every knowledge slot.
pub fn build_vocabulary(bundle: &CorpusBundle, train: &[usize], min_freq: usize) -> Result<Vocabulary> {
    let texts = train
        .iter()
        .map(|&i| bundle.examples[i].tokens.as_slice())
        .chain(bundle.knowledge.slots().iter().map(|s| s.tokens.as_slice()));
    Vocabulary::build(texts, min_freq)
}

/// Encodes the listed examples in order, `batch_size` at a time.
pub fn make_batches(model: &MemoryModel, bundle: &CorpusBundle, indices: &[usize], batch_size: usize) -> Vec<Batch> {
    indices
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let targets: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| bundle.target_indices(&bundle.examples[i]))
                .collect();
            model.batch(chunk.iter().zip(&targets).map(|(&i, t)| {
                (
                    bundle.examples[i].tokens.as_slice(),
                    bundle.examples[i].label,
                    t.as_slice(),
                )
            }))
        })
        .collect()
}

fn at_epoch(epoch: usize, err: Error) -> Error {
    match err {
        Error::Numeric { node } => Error::Divergence {
            epoch,
            reason: format!("non-finite value at {node}"),
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    /// `patience` consecutive epochs without improvement.
    Stop,
}

/// Patience counter over validation macro-F1. Equal F1 counts as an
/// improvement when the validation loss is lower.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, f1: f64, loss: f64) -> Progress {
        let improved = match self.best {
            None => true,
            Some((bf, bl)) => f1 > bf || (f1 == bf && loss < bl),
        };
        if improved {
            self.best = Some((f1, loss));
            self.since_best = 0;
            Progress::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Progress::Stop
            } else {
                Progress::Stale
            }
        }
    }
}

/// Training indices of one epoch. With oversampling, each positive appears
/// `round(negatives / positives)` times (at least once).
pub fn epoch_pool(bundle: &CorpusBundle, train: &[usize], oversample: bool) -> Vec<usize> {
    let positives = train.iter().filter(|&&i| bundle.examples[i].label == 1).count();
    let negatives = train.len() - positives;
    if !oversample || positives == 0 || negatives <= positives {
        return train.to_vec();
    }
    let copies = (negatives as f64 / positives as f64).round() as usize;
    train
        .iter()
        .flat_map(|&i| {
            let n = if bundle.examples[i].label == 1 { copies } else { 1 };
            std::iter::repeat_n(i, n)
        })
        .collect()
}

/// Trains one model on `fold.train`, early-stopping on validation macro-F1.
/// The returned run carries the parameters and priorities of the best epoch.
pub fn train(bundle: &CorpusBundle, fold: &Fold, config: &RunConfig, seed: u64) -> Result<TrainedRun> {
    config.validate()?;
    if fold.train.is_empty() {
        return Err(Error::data(format!("fold {} has an empty training split", fold.index)));
    }
    let kb = &bundle.knowledge;
    let sampler = config.sampler_config(derive_seed(seed, STREAM_SAMPLER));
    if config.memory == MemoryMode::Sampled {
        sampler.validate(kb.len())?;
    }
    let vocab = build_vocabulary(bundle, &fold.train, config.min_freq)?;
    let mut model = MemoryModel::new(config.model_config(), vocab, derive_seed(seed, STREAM_INIT))?;
    let full = model.full_memory(kb);
    let mut state = PriorityState::uniform(kb.len());
    let adam = Adam::new(config.lr, config.l2);
    let mut adam_state = AdamState::default();
    let opts = GraphOptions {
        ss: config.ss_config(),
        ..GraphOptions::default()
    };
    // Validation falls back to the training split when the fold has none.
    let val_idx = if fold.validation.is_empty() {
        &fold.train
    } else {
        &fold.validation
    };
    let val_gold: Vec<usize> = val_idx.iter().map(|&i| bundle.examples[i].label).collect();
    let val_batches = make_batches(&model, bundle, val_idx, config.batch_size);
    let val_seed = derive_seed(seed, STREAM_VALIDATION);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let dropout_base = derive_seed(seed, STREAM_DROPOUT);
    let mut order = epoch_pool(bundle, &fold.train, config.oversample_positives);
    let mut step = 0u64;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        validation_f1: Vec::new(),
        validation_loss: Vec::new(),
        best_epoch: 0,
        stop_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<(ParamStore, PriorityState)> = None;
    let mut stopper = EarlyStopping::new(config.patience);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in make_batches(&model, bundle, &order, config.batch_size) {
            let dropout_seed = derive_seed(dropout_base, step);
            step += 1;
            let fwd = match config.memory {
                MemoryMode::Full => model.train_step(&batch, &full, &opts, &adam, &mut adam_state, dropout_seed),
                MemoryMode::Sampled => {
                    let ctx = StepContext {
                        optimizer: &adam,
                        adam_state: &mut adam_state,
                        ss: opts.ss,
                        dropout_seed,
                    };
                    training_step_with_sampling(&mut model, kb, &batch, &mut state, &sampler, ctx, &mut sample_rng)
                        .map(|s| s.forward)
                }
            }
            .map_err(|e| at_epoch(epoch, e))?;
            loss_sum += fwd.loss * batch.len() as f64;
        }
        let loss = loss_sum / order.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("training loss is {loss}"),
            });
        }
        let runs = predict(&model, kb, &val_batches, &state, config, val_seed, 1).map_err(|e| at_epoch(epoch, e))?;
        let outputs = &runs[0].outputs;
        let preds: Vec<usize> = outputs.iter().map(|o| o.predicted).collect();
        let f1 = f1_report(&val_gold, &preds)?.macro_f1;
        let val_loss = outputs
            .iter()
            .zip(&val_gold)
            .map(|(o, &g)| -o.probabilities[g].max(crate::losses::PROB_FLOOR).ln())
            .sum::<f64>()
            / val_gold.len() as f64;
        history.train_loss.push(loss);
        history.validation_f1.push(f1);
        history.validation_loss.push(val_loss);
        history.stop_epoch = epoch;
        log::debug!("epoch {epoch}: loss {loss:.5}, validation F1 {f1:.4}, validation loss {val_loss:.5}");

        match stopper.observe(f1, val_loss) {
            Progress::Improved => {
                best = Some((model.params().clone(), state.clone()));
                history.best_epoch = epoch;
            }
            Progress::Stale => {}
            Progress::Stop => {
                history.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (params, priorities) = best.expect("at least one epoch ran");
    model.set_params(params);
    Ok(TrainedRun {
        seed,
        model,
        priorities,
        history,
    })
}

/// Outcome of several independently seeded training runs.
#[derive(Debug, Clone)]
pub struct MultiStart {
    pub best: TrainedRun,
    pub best_index: usize,
    /// Best validation F1 of every run, in seed order.
    pub validation_f1: Vec<f64>,
}

/// Trains `config.restarts` runs and keeps the one with the highest
/// validation macro-F1, the earliest run winning ties.
pub fn multi_start(bundle: &CorpusBundle, fold: &Fold, config: &RunConfig) -> Result<MultiStart> {
    let seeds: Vec<u64> = (0..config.restarts)
        .map(|r| restart_seed(config.seed, fold.index, r))
        .collect();
    multi_start_with_seeds(bundle, fold, config, &seeds)
}

pub fn multi_start_with_seeds(
    bundle: &CorpusBundle,
    fold: &Fold,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<MultiStart> {
    if seeds.is_empty() {
        return Err(Error::config("multi-start needs at least one seed"));
    }
    let runs: Vec<TrainedRun> = seeds
        .par_iter()
        .map(|&s| train(bundle, fold, config, s))
        .collect::<Result<_>>()?;
    let validation_f1: Vec<f64> = runs.iter().map(|r| r.history.best_validation_f1()).collect();
    let mut best_index = 0;
    for (i, &f) in validation_f1.iter().enumerate() {
        if f > validation_f1[best_index] {
            best_index = i;
        }
    }
    let best = runs.into_iter().nth(best_index).expect("index in range");
    Ok(MultiStart {
        best,
        best_index,
        validation_f1,
    })
}

/// Everything produced for one fold of a cross-validation.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: Fold,
    pub training: MultiStart,
    pub evaluation: FoldEvaluation,
}

/// Multi-start training and evaluation on every fold. Folds run in parallel;
/// results come back in fold order.
pub fn cross_validate(bundle: &CorpusBundle, config: &RunConfig) -> Result<Vec<FoldRun>> {
    config.validate()?;
    let folds = crate::corpus::kfold_split(bundle, config.folds, config.seed)?;
    folds
        .into_par_iter()
        .map(|fold| {
            let training = multi_start(bundle, &fold, config)?;
            let evaluation = evaluate(&training.best.model, &training.best.priorities, bundle, &fold, config)?;
            Ok(FoldRun {
                fold,
                training,
                evaluation,
            })
        })
        .collect()
}
