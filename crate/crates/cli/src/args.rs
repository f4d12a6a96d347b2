use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use knowmem::harness::{MemoryMode, RunConfig, Supervision};
use knowmem::SamplingStrategy;

/// Where to find a corpus: either a directory holding `examples.jsonl` and
/// `knowledge.jsonl`, or the two files given explicitly.
#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// Directory with examples.jsonl and knowledge.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
}

impl CorpusArgs {
    pub fn paths(&self) -> Result<(PathBuf, PathBuf)> {
        let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
            match (explicit, &self.data) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(dir)) => Ok(dir.join(name)),
                (None, None) => {
                    Err(knowmem::Error::Config(format!("pass --data or --{}", name.trim_end_matches(".jsonl"))).into())
                }
            }
        };
        Ok((
            pick(&self.examples, "examples.jsonl")?,
            pick(&self.knowledge, "knowledge.jsonl")?,
        ))
    }

    pub fn load(&self) -> Result<knowmem::CorpusBundle> {
        let (e, k) = self.paths()?;
        knowmem::corpus::load_corpus(&e, &k)
            .with_context(|| format!("loading corpus {} + {}", e.display(), k.display()))
    }
}

/// Run settings. A `--config` file is read first and flags override it.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat TOML file of run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Margin of the target ranking loss.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Attention threshold for memory usage metrics.
    #[arg(long)]
    pub delta: Option<f64>,
    /// uniform, priority-attention or priority-loss-gain.
    #[arg(long)]
    pub strategy: Option<SamplingStrategy>,
    /// Slots sampled per batch.
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub filter_negatives: Option<bool>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Inference repetitions in sampled mode.
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ws or ss.
    #[arg(long)]
    pub supervision: Option<Supervision>,
    /// full or sampled.
    #[arg(long)]
    pub memory: Option<MemoryMode>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Repeat positive training examples to balance the classes.
    #[arg(long)]
    pub oversample_positives: Option<bool>,
    /// Comma-separated P@K cut-offs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident, $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }

    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        let args = self;
        overlay!(
            cfg,
            args,
            embedding_dim,
            hidden_units,
            lr,
            l2,
            dropout,
            batch_size,
            max_epochs,
            patience,
            gamma,
            delta,
            strategy,
            sample_size,
            epsilon,
            alpha,
            filter_negatives,
            folds,
            restarts,
            repetitions,
            seed,
            supervision,
            memory,
            min_freq,
            oversample_positives,
            ks,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}
