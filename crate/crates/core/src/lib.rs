//! Memory-augmented text classification over natural-language knowledge.
//!
//! A classifier attends over a memory of short texts (class descriptions,
//! supporting facts) with an independent sigmoid per slot. Attention can be
//! trained with the classification loss alone or with an added ranking term
//! on annotated target slots, and large memories can be subsampled per batch
//! with learned priorities.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod tensor;

pub use corpus::{CorpusBundle, Example, Fold, SyntheticSpec};
pub use encoder::Vocabulary;
pub use error::{Error, Result};
pub use harness::{MemoryMode, RunConfig, Supervision, TrainHistory, TrainedRun};
pub use metrics::{AttentionTrace, MemoryReport};
pub use model::{KnowledgeBase, MemoryModel, MemorySlot, ModelConfig};
pub use sampler::{PriorityState, SamplerConfig, SamplingStrategy};
pub use seed::derive_seed;
pub use tensor::DenseTensor;
