use proptest::prelude::*;

use super::*;
use crate::encoder::{Vocabulary, UNK};
use crate::model::{MemorySlot, ModelConfig};

fn cfg(strategy: SamplingStrategy, k: usize, alpha: f64) -> SamplerConfig {
    SamplerConfig {
        strategy,
        sample_size: k,
        epsilon: 0.01,
        alpha,
        filter_negatives: true,
        seed: 5,
    }
}

fn attn(rows: &[Vec<f64>]) -> DenseTensor {
    DenseTensor::from_rows(rows).unwrap()
}

#[test]
fn alpha_zero_flattens_priorities() {
    let p = priority_from_importance(&[0.0, 0.3, 7.0], &cfg(SamplingStrategy::PriorityAttention, 1, 0.0)).unwrap();
    assert_eq!(p.raw, vec![1.0; 3]);
    assert_eq!(p.distribution, vec![1.0 / 3.0; 3]);
}

#[test]
fn priority_formula_examples() {
    let mut c = cfg(SamplingStrategy::PriorityAttention, 1, 1.0);
    assert!((priority_from_importance(&[1.0], &c).unwrap().raw[0] - 1.01).abs() < 1e-15);
    c.alpha = 0.5;
    let raw = priority_from_importance(&[0.25], &c).unwrap().raw[0];
    assert!((raw - 0.26f64.sqrt()).abs() < 1e-15);
    assert!((raw - 0.5099).abs() < 1e-4);
}

#[test]
fn zero_epsilon_is_rejected() {
    let mut c = cfg(SamplingStrategy::PriorityAttention, 1, 1.0);
    c.epsilon = 0.0;
    assert!(c.validate(3).is_err());
    c.epsilon = 0.01;
    c.sample_size = 4;
    assert!(c.validate(3).is_err());
}

#[test]
fn masked_average_excludes_negatives() {
    let a = attn(&[vec![0.8], vec![0.4], vec![0.9]]);
    let w = attention_importance(&a, &[1, 1, 0], &cfg(SamplingStrategy::PriorityAttention, 1, 1.0)).unwrap();
    assert!((w[0] - 0.6).abs() < 1e-15);
}

#[test]
fn unfiltered_average_uses_every_example() {
    let a = attn(&[vec![0.8], vec![0.4], vec![0.9]]);
    let mut c = cfg(SamplingStrategy::PriorityAttention, 1, 1.0);
    c.filter_negatives = false;
    let w = attention_importance(&a, &[1, 1, 0], &c).unwrap();
    assert!((w[0] - 0.7).abs() < 1e-15);
}

#[test]
fn zero_attention_zero_importance() {
    let a = attn(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
    let w = attention_importance(&a, &[1, 1], &cfg(SamplingStrategy::PriorityAttention, 1, 1.0)).unwrap();
    assert_eq!(w, vec![0.0, 0.0]);
}

#[test]
fn single_positive_gives_its_row() {
    let a = attn(&[vec![0.3, 0.9], vec![0.5, 0.5]]);
    let w = attention_importance(&a, &[0, 1], &cfg(SamplingStrategy::PriorityAttention, 1, 1.0)).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
}

#[test]
fn only_negatives_gives_no_update() {
    let a = attn(&[vec![0.3, 0.9]]);
    assert!(attention_importance(&a, &[0], &cfg(SamplingStrategy::PriorityAttention, 1, 1.0)).is_none());
}

#[test]
fn loss_gain_examples() {
    let c = cfg(SamplingStrategy::PriorityLossGain, 1, 1.0);
    let a = attn(&[vec![0.5]]);
    let w = loss_gain_importance(&a, &[0.7], &[0.2], &[1], &c).unwrap();
    assert!((w[0] - 0.5 * 0.5f64.exp()).abs() < 1e-15);
    assert!((w[0] - 0.8244).abs() < 1e-4);
    let w = loss_gain_importance(&a, &[0.2], &[0.7], &[1], &c).unwrap();
    assert!((w[0] - 0.3033).abs() < 1e-4);
    assert!(w[0] > 0.0);
}

#[test]
fn loss_gain_exponent_is_clamped() {
    let c = cfg(SamplingStrategy::PriorityLossGain, 1, 1.0);
    let w = loss_gain_importance(&attn(&[vec![1.0]]), &[1e6], &[0.0], &[1], &c).unwrap();
    assert_eq!(w[0], GAIN_CLAMP.exp());
}

#[test]
fn full_sample_returns_every_slot() {
    let state = PriorityState::from_priorities(vec![5.0, 0.1, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_memory(&state, 3, &mut rng).unwrap(), vec![0, 1, 2]);
    assert!(matches!(sample_memory(&state, 4, &mut rng), Err(Error::Config(_))));
}

#[test]
fn uniform_inclusion_frequency() {
    // P(slot in sample) = K / |M| = 0.25 for uniform sampling without replacement.
    let state = PriorityState::uniform(20);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 20];
    let draws = 10_000;
    for _ in 0..draws {
        let s = sample_memory(&state, 5, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for i in s {
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn point_mass_is_almost_always_drawn() {
    let mut priorities = vec![1e-6; 10];
    priorities[3] = 1.0;
    let state = PriorityState::from_priorities(priorities).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let hits = (0..10_000)
        .filter(|_| sample_memory(&state, 1, &mut rng).unwrap() == vec![3])
        .count();
    assert!(hits as f64 / 10_000.0 > 0.99);
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let state = PriorityState::from_priorities((1..=12).map(f64::from).collect()).unwrap();
    let a: Vec<_> = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..50).map(|_| sample_memory(&state, 4, &mut rng).unwrap()).collect()
    };
    let b: Vec<_> = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..50).map(|_| sample_memory(&state, 4, &mut rng).unwrap()).collect()
    };
    assert_eq!(a, b);
}

// ---- training / inference procedures ----

fn fixture() -> (MemoryModel, KnowledgeBase, Vec<Batch>) {
    let tokens: Vec<String> = std::iter::once(UNK.to_string())
        .chain((1..20).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let slots = (0..6)
        .map(|i| MemorySlot {
            id: format!("s{i}"),
            tokens: vec![format!("w{}", 2 * i + 1), format!("w{}", 2 * i + 2)],
        })
        .collect();
    let kb = KnowledgeBase::new(slots).unwrap();
    let config = ModelConfig {
        embedding_dim: 6,
        hidden_units: 32,
        num_classes: 2,
        dropout: 0.5,
    };
    let model = MemoryModel::new(config, vocab, 17).unwrap();
    let batches = vec![
        Batch {
            token_ids: vec![vec![1, 2, 13], vec![3, 4], vec![14, 15], vec![16]],
            labels: vec![1, 1, 0, 0],
            targets: vec![vec![0], vec![1], vec![], vec![]],
        },
        Batch {
            token_ids: vec![vec![5, 6], vec![17, 18], vec![9, 19]],
            labels: vec![1, 0, 1],
            targets: vec![vec![2], vec![], vec![4]],
        },
    ];
    (model, kb, batches)
}

fn run_steps(strategy: SamplingStrategy, alpha: f64, steps: usize) -> (Vec<f64>, Vec<PriorityState>) {
    let (mut model, kb, batches) = fixture();
    let c = cfg(strategy, 3, alpha);
    let mut state = PriorityState::uniform(kb.len());
    let adam = Adam::default();
    let mut adam_state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut losses = Vec::new();
    let mut states = Vec::new();
    for step in 0..steps {
        let ctx = StepContext {
            optimizer: &adam,
            adam_state: &mut adam_state,
            ss: Some(SsConfig::default()),
            dropout_seed: step as u64,
        };
        let out =
            training_step_with_sampling(&mut model, &kb, &batches[step % 2], &mut state, &c, ctx, &mut rng).unwrap();
        losses.push(out.forward.loss);
        states.push(state.clone());
    }
    (losses, states)
}

#[test]
fn uniform_strategy_keeps_priorities_fixed() {
    let (_, states) = run_steps(SamplingStrategy::Uniform, 0.6, 6);
    for s in states {
        assert_eq!(s, PriorityState::uniform(6));
    }
}

#[test]
fn alpha_zero_priority_strategies_stay_uniform() {
    for strategy in [SamplingStrategy::PriorityAttention, SamplingStrategy::PriorityLossGain] {
        let (_, states) = run_steps(strategy, 0.0, 6);
        for s in states {
            assert_eq!(s.distribution(), PriorityState::uniform(6).distribution());
        }
    }
}

#[test]
fn priority_strategies_move_the_distribution() {
    let (_, states) = run_steps(SamplingStrategy::PriorityAttention, 0.6, 4);
    assert_ne!(
        states.last().unwrap().distribution(),
        PriorityState::uniform(6).distribution()
    );
}

#[test]
fn seeded_steps_reproduce() {
    for strategy in [SamplingStrategy::PriorityAttention, SamplingStrategy::PriorityLossGain] {
        let (l1, s1) = run_steps(strategy, 0.6, 2);
        let (l2, s2) = run_steps(strategy, 0.6, 2);
        assert_eq!(
            l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(s1, s2);
    }
}

#[test]
fn negative_only_batch_leaves_state_untouched() {
    let (mut model, kb, _) = fixture();
    let c = cfg(SamplingStrategy::PriorityLossGain, 3, 0.6);
    let mut state = PriorityState::from_priorities(vec![0.3, 1.0, 0.7, 0.2, 0.9, 0.5]).unwrap();
    let before = state.clone();
    let batch = Batch {
        token_ids: vec![vec![14], vec![15, 16]],
        labels: vec![0, 0],
        targets: vec![vec![], vec![]],
    };
    let adam = Adam::default();
    let mut adam_state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ctx = StepContext {
        optimizer: &adam,
        adam_state: &mut adam_state,
        ss: None,
        dropout_seed: 0,
    };
    let out = training_step_with_sampling(&mut model, &kb, &batch, &mut state, &c, ctx, &mut rng).unwrap();
    assert!(!out.priorities_updated);
    assert_eq!(state, before);
}

#[test]
fn full_memory_inference_is_repetition_invariant() {
    let (model, kb, batches) = fixture();
    let state = PriorityState::from_priorities(vec![0.3, 1.0, 0.7, 0.2, 0.9, 0.5]).unwrap();
    let frozen = state.clone();
    let runs = inference_with_sampling(
        &model,
        &kb,
        &batches,
        &state,
        &cfg(SamplingStrategy::PriorityAttention, 6, 0.6),
        3,
    )
    .unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs[0].outputs, runs[1].outputs);
    assert_eq!(runs[1].outputs, runs[2].outputs);
    assert_eq!(state, frozen);
}

#[test]
fn sampled_inference_records_each_repetition() {
    let (model, kb, batches) = fixture();
    let state = PriorityState::uniform(6);
    let runs = inference_with_sampling(
        &model,
        &kb,
        &batches,
        &state,
        &cfg(SamplingStrategy::Uniform, 2, 0.6),
        3,
    )
    .unwrap();
    assert_eq!(runs.len(), 3);
    let seeds: std::collections::HashSet<u64> = runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
    for r in &runs {
        assert_eq!(r.outputs.len(), 7);
        assert!(r.outputs.iter().all(|o| o.slot_ids.len() == 2));
    }
}

proptest! {
    #[test]
    fn distribution_stays_normalized_and_positive(
        updates in proptest::collection::vec((proptest::collection::btree_set(0usize..8, 1..5), 0.0f64..5.0), 1..30),
        alpha in 0.0f64..2.0,
    ) {
        let c = cfg(SamplingStrategy::PriorityAttention, 1, alpha);
        let mut state = PriorityState::uniform(8);
        for (slots, w) in updates {
            let slots: Vec<usize> = slots.into_iter().collect();
            let weights: Vec<f64> = slots.iter().map(|&s| w * (s as f64 + 1.0) / 8.0).collect();
            state.update(&slots, &weights, &c).unwrap();
            let total: f64 = state.distribution().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(state.distribution().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn loss_gain_reduces_to_attention_when_losses_agree(
        rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..6),
        losses in proptest::collection::vec(0.0f64..3.0, 6),
        labels in proptest::collection::vec(0usize..2, 6),
    ) {
        let n = rows.len();
        let a = attn(&rows);
        let c = cfg(SamplingStrategy::PriorityLossGain, 1, 0.6);
        let lg = loss_gain_importance(&a, &losses[..n], &losses[..n], &labels[..n], &c);
        let at = attention_importance(&a, &labels[..n], &c);
        prop_assert_eq!(lg, at);
    }

    #[test]
    fn raising_importance_never_lowers_probability(
        base in proptest::collection::vec(0.0f64..2.0, 5),
        bump in 0.0f64..3.0,
        slot in 0usize..5,
        alpha in 0.0f64..2.0,
    ) {
        let c = cfg(SamplingStrategy::PriorityAttention, 1, alpha);
        let before = priority_from_importance(&base, &c).unwrap();
        let mut raised = base.clone();
        raised[slot] += bump;
        let after = priority_from_importance(&raised, &c).unwrap();
        prop_assert!(after.distribution[slot] >= before.distribution[slot] - 1e-15);
    }
}
