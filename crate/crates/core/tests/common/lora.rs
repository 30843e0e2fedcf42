use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlab::autodiff::Tape;
use rlab::distill::{train_adapters, Mode, TrainConfig};
use rlab::lora::{inject, low_rank_delta, LoraConfig};
use rlab::persist::{DataSource, Dataset};
use rlab::tensor::Tensor;
use rlab::tokenizer::VOCAB_SIZE;
use rlab::transformer::{LanguageModel, LowRankVars, ModelConfig, Transformer};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 48,
        max_seq_len: 24,
        ..ModelConfig::desk()
    }
}

fn random_records(n: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            (0..len)
                .map(|_| rng.random_range(0..VOCAB_SIZE as u32))
                .collect()
        })
        .collect()
}

fn dataset(records: Vec<Vec<u32>>) -> Dataset {
    Dataset::new(
        records,
        VOCAB_SIZE,
        0,
        None,
        DataSource::Corpus {
            split: "train".into(),
        },
    )
}

fn sft(lr: f64, batch_size: usize, grad_accum: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        grad_accum,
        epochs,
        warmup_steps: 0,
        lora: Some(LoraConfig {
            rank: 4,
            alpha: 4.0,
            ..LoraConfig::desk()
        }),
        ..TrainConfig::for_mode(Mode::SftLora)
    }
}

fn max_gap(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn fresh_adapters_leave_logits_bit_equal() {
    let base = Transformer::init(ModelConfig::desk(), 3).unwrap();
    let adapted = inject(base.clone(), &LoraConfig::desk()).unwrap();
    for r in random_records(8, 64, 1) {
        assert_eq!(
            adapted.logits(&r).unwrap().data(),
            base.forward(&r).unwrap().data()
        );
    }
}

pub fn base_weights_frozen_after_100_steps() {
    let base = Transformer::init(small(), 4).unwrap();
    let before = base.weights.clone();
    let cfg = sft(1e-2, 1, 1, 1);
    let mut adapted = inject(base, cfg.lora.as_ref().unwrap()).unwrap();
    let fresh = adapted.adapters().clone();
    let log = train_adapters(
        None,
        &mut adapted,
        &dataset(random_records(100, 20, 2)),
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(log.steps.len(), 100);
    assert_eq!(adapted.base().weights, before);
    assert_ne!(adapted.adapters(), &fresh);
}

pub fn merged_weights_reproduce_trained_adapters() {
    let base = Transformer::init(ModelConfig::desk(), 5).unwrap();
    let cfg = TrainConfig {
        lora: Some(LoraConfig::desk()),
        ..sft(5e-3, 4, 1, 1)
    };
    let mut adapted = inject(base.clone(), cfg.lora.as_ref().unwrap()).unwrap();
    train_adapters(
        None,
        &mut adapted,
        &dataset(random_records(32, 40, 6)),
        &cfg,
        None,
    )
    .unwrap();
    let merged = Transformer::new(base.config.clone(), adapted.merge().unwrap()).unwrap();
    assert!(adapted.merge().is_err());
    let mut moved = 0.0f32;
    for r in random_records(32, 128, 7) {
        let a = adapted.logits(&r).unwrap();
        let m = merged.forward(&r).unwrap();
        let gap = max_gap(a.data(), m.data());
        assert!(gap < 1e-5, "logit gap {gap}");
        moved = moved.max(max_gap(a.data(), base.forward(&r).unwrap().data()));
    }
    assert!(moved > 1e-3, "training left the adapters inert ({moved})");
}

pub fn micro_batching_does_not_change_the_step() {
    let base = Transformer::init(ModelConfig::desk(), 8).unwrap();
    let data = dataset(random_records(32, 48, 9));
    let run = |b, a| {
        let cfg = TrainConfig {
            lora: Some(LoraConfig::desk()),
            ..sft(5e-4, b, a, 1)
        };
        let mut adapted = inject(base.clone(), cfg.lora.as_ref().unwrap()).unwrap();
        let log = train_adapters(None, &mut adapted, &data, &cfg, None).unwrap();
        assert_eq!(log.steps.len(), 1);
        (adapted.into_adapters(), log.steps[0].loss)
    };
    let (accum, loss_a) = run(1, 32);
    let (batch, loss_b) = run(32, 1);
    assert!((loss_a - loss_b).abs() < 1e-5);
    for ((name, x), (_, y)) in accum.parameters().iter().zip(batch.parameters().iter()) {
        let gap = max_gap(x.data(), y.data());
        assert!(gap < 1e-5, "{name}: {gap}");
    }
}

/// Doubling α doubles `Y − WX` exactly for random A, B and X.
pub fn adapter_contribution_is_linear_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (n, k, d, r) = (
            rng.random_range(1..6),
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..4),
        );
        let mut random = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(
                shape,
                (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            )
            .unwrap()
        };
        let (xv, av, bv) = (random(&[n, k]), random(&[r, k]), random(&[d, r]));
        let alpha = rng.random_range(0.1f32..4.0);
        let mut tape = Tape::new();
        let (x, a, b) = (tape.constant(xv), tape.constant(av), tape.constant(bv));
        let once = low_rank_delta(&mut tape, x, &LowRankVars { a, b, alpha }).unwrap();
        let twice = low_rank_delta(
            &mut tape,
            x,
            &LowRankVars {
                a,
                b,
                alpha: 2.0 * alpha,
            },
        )
        .unwrap();
        let doubled: Vec<f32> = tape.value(once).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(twice).data(), doubled.as_slice());
    }
}

pub const CASES: &[(&str, fn())] = &[
    (
        "fresh_adapters_leave_logits_bit_equal",
        fresh_adapters_leave_logits_bit_equal,
    ),
    (
        "base_weights_frozen_after_100_steps",
        base_weights_frozen_after_100_steps,
    ),
    (
        "merged_weights_reproduce_trained_adapters",
        merged_weights_reproduce_trained_adapters,
    ),
    (
        "micro_batching_does_not_change_the_step",
        micro_batching_does_not_change_the_step,
    ),
    (
        "adapter_contribution_is_linear_in_alpha",
        adapter_contribution_is_linear_in_alpha,
    ),
];
