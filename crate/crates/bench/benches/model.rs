use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use knowmem::autodiff::{Adam, AdamState, ForwardOptions};
use knowmem::losses::SsConfig;
use knowmem::model::GraphOptions;
use knowmem_bench::fixture;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for slots in [10, 50] {
        let (bundle, model, batches) = fixture(slots, 64, 32);
        let memory = model.full_memory(&bundle.knowledge);
        group.bench_with_input(BenchmarkId::from_parameter(slots), &slots, |b, _| {
            b.iter(|| {
                model
                    .forward(
                        &batches[0],
                        &memory,
                        &GraphOptions::default(),
                        ForwardOptions::inference(),
                    )
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for slots in [10, 50] {
        let (bundle, mut model, batches) = fixture(slots, 64, 32);
        let memory = model.full_memory(&bundle.knowledge);
        let opts = GraphOptions {
            ss: Some(SsConfig::default()),
            ..GraphOptions::default()
        };
        let adam = Adam::new(1e-3, 1e-5);
        let mut state = AdamState::default();
        let mut step = 0u64;
        group.bench_with_input(BenchmarkId::from_parameter(slots), &slots, |b, _| {
            b.iter(|| {
                step += 1;
                model
                    .train_step(&batches[0], &memory, &opts, &adam, &mut state, step)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
