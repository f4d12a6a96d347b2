//! Fixtures shared by the benchmarks.

use knowmem::corpus::generate_synthetic;
use knowmem::harness::{build_vocabulary, make_batches};
use knowmem::model::Batch;
use knowmem::{CorpusBundle, MemoryModel, ModelConfig, SyntheticSpec};

/// Default-sized synthetic corpus with a model built over it.
pub fn fixture(slots: usize, embedding_dim: usize, batch_size: usize) -> (CorpusBundle, MemoryModel, Vec<Batch>) {
    let bundle = generate_synthetic(&SyntheticSpec {
        slots,
        vocab_size: 200 + 6 * slots,
        noise: 0.3,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .expect("valid spec");
    let all: Vec<usize> = (0..bundle.examples.len()).collect();
    let vocab = build_vocabulary(&bundle, &all, 1).expect("non-empty corpus");
    let config = ModelConfig {
        embedding_dim,
        ..ModelConfig::default()
    };
    let model = MemoryModel::new(config, vocab, 7).expect("valid config");
    let batches = make_batches(&model, &bundle, &all, batch_size);
    (bundle, model, batches)
}
