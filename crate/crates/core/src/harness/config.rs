use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SsConfig;
use crate::model::ModelConfig;
use crate::sampler::{SamplerConfig, SamplingStrategy};

/// Weak supervision trains on the classification loss only; strong
/// supervision adds the target-ranking term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Ws,
    Ss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Full,
    Sampled,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ws" => Ok(Self::Ws),
            "ss" => Ok(Self::Ss),
            other => Err(Error::config(format!(
                "unknown supervision `{other}`; expected ws or ss"
            ))),
        }
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "sampled" => Ok(Self::Sampled),
            other => Err(Error::config(format!(
                "unknown memory mode `{other}`; expected full or sampled"
            ))),
        }
    }
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ws => "ws",
            Self::Ss => "ss",
        })
    }
}

impl std::fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Sampled => "sampled",
        })
    }
}

/// Every knob of an experiment. Serializes as a flat key-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub delta: f64,
    pub strategy: SamplingStrategy,
    pub sample_size: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub filter_negatives: bool,
    pub folds: usize,
    pub restarts: usize,
    /// Inference repetitions in sampled mode.
    pub repetitions: usize,
    pub seed: u64,
    pub supervision: Supervision,
    pub memory: MemoryMode,
    pub min_freq: usize,
    /// Repeats positive training examples so each epoch sees both classes
    /// about equally often.
    pub oversample_positives: bool,
    /// Cut-offs reported as P@K.
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            hidden_units: 64,
            lr: 1e-3,
            l2: 1e-5,
            dropout: 0.5,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            gamma: 0.5,
            delta: 0.5,
            strategy: SamplingStrategy::PriorityLossGain,
            sample_size: 5,
            epsilon: 0.01,
            alpha: 0.6,
            filter_negatives: true,
            folds: 10,
            restarts: 3,
            repetitions: 3,
            seed: 42,
            supervision: Supervision::Ss,
            memory: MemoryMode::Full,
            min_freq: 1,
            oversample_positives: false,
            ks: vec![1, 3, 5],
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let checks: [(bool, &str); 12] = [
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.l2 >= 0.0 && self.l2.is_finite(), "l2 must be non-negative"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.patience >= 1, "patience must be at least 1"),
            (self.gamma > 0.0 && self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            ((0.0..=1.0).contains(&self.delta), "delta must lie in [0, 1]"),
            (self.folds >= 2, "folds must be at least 2"),
            (self.restarts >= 1, "restarts must be at least 1"),
            (self.repetitions >= 1, "repetitions must be at least 1"),
            (self.min_freq >= 1, "min_freq must be at least 1"),
            (
                !self.ks.is_empty() && !self.ks.contains(&0),
                "ks must be a non-empty list of positive cut-offs",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        if self.sample_size == 0 {
            return Err(Error::config("sample_size must be at least 1"));
        }
        SamplerConfig {
            sample_size: 1,
            ..self.sampler_config(0)
        }
        .validate(1)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            hidden_units: self.hidden_units,
            num_classes: 2,
            dropout: self.dropout,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            strategy: self.strategy,
            sample_size: self.sample_size,
            epsilon: self.epsilon,
            alpha: self.alpha,
            filter_negatives: self.filter_negatives,
            seed,
        }
    }

    pub fn ss_config(&self) -> Option<SsConfig> {
        match self.supervision {
            Supervision::Ws => None,
            Supervision::Ss => Some(SsConfig {
                gamma: self.gamma,
                enabled: true,
            }),
        }
    }
}
