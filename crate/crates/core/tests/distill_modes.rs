use rlab::degrade::{corrupt_weights, CorruptionSpec};
use rlab::distill::{
    full_distill_train, recover_lora_train, sft_lora_train, TeacherCache, TrainConfig,
};
use rlab::lora::LoraConfig;
use rlab::persist::{DataSource, Dataset};
use rlab::tokenizer::{ByteTokenizer, VOCAB_SIZE};
use rlab::transformer::{ModelConfig, Transformer};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 48,
        max_seq_len: 32,
        ..ModelConfig::desk()
    }
}

fn pair() -> (Transformer, Transformer) {
    let teacher = Transformer::init(small(), 1).unwrap();
    let spec = CorruptionSpec {
        relative_scale: 2.0,
        seed: 4,
        ..Default::default()
    };
    let student =
        Transformer::new(small(), corrupt_weights(&teacher.weights, &spec).unwrap().0).unwrap();
    (teacher, student)
}

fn texts(lines: &[&str]) -> Dataset {
    let records = lines
        .iter()
        .map(|l| ByteTokenizer.encode_document(l.as_bytes()))
        .collect();
    Dataset::new(
        records,
        VOCAB_SIZE,
        0,
        None,
        DataSource::Corpus {
            split: "labeled".into(),
        },
    )
}

fn batch() -> Dataset {
    texts(&[
        "The cat sees a dog.",
        "12+7=19.",
        "qxe>qxe.",
        "A red fox hears my boat.",
    ])
}

fn lora() -> Option<LoraConfig> {
    Some(LoraConfig {
        rank: 4,
        alpha: 4.0,
        ..LoraConfig::desk()
    })
}

#[test]
fn full_distill_loss_falls_on_a_fixed_batch() {
    let (teacher, student) = pair();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        grad_accum: 1,
        warmup_steps: 0,
        ..TrainConfig::full_distill()
    };
    let (weights, log) = full_distill_train(&teacher, &student, &batch(), &cfg, None).unwrap();
    assert_eq!(log.steps.len(), 50);
    assert_eq!(log.trainable_params, small().param_count());
    assert_eq!(log.trainable_params, student.weights.param_count());
    let first = log.steps[0].loss;
    let last = log.final_loss().unwrap();
    assert!(last < first, "loss went from {first} to {last}");
    assert!(log.steps.iter().all(|s| s.loss >= 0.0));
    assert_ne!(weights, student.weights);
}

#[test]
fn recovery_leaves_teacher_and_student_untouched() {
    let (teacher, student) = pair();
    let (t0, s0) = (teacher.clone(), student.clone());
    let cfg = TrainConfig {
        epochs: 2,
        lora: lora(),
        ..TrainConfig::recover_lora()
    };
    let mut cache = TeacherCache::new(&teacher);
    let (adapters, log) =
        recover_lora_train(&teacher, &student, &batch(), &cfg, Some(&mut cache)).unwrap();
    assert_eq!(teacher, t0);
    assert_eq!(student, s0);
    assert_eq!(cache.len(), 4);
    assert_eq!(log.trainable_params, adapters.param_count());
    // KV adapters on two layers: 2 · 2 · r · (d_model + kv_dim).
    assert_eq!(adapters.param_count(), 2 * 2 * 4 * (32 + 16));
}

#[test]
fn sft_reduces_labeled_loss() {
    let (_, student) = pair();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        grad_accum: 1,
        warmup_steps: 0,
        lr: 1e-2,
        lora: lora(),
        ..TrainConfig::sft_lora()
    };
    let (_, log) = sft_lora_train(&student, &batch(), &cfg).unwrap();
    let first = log.steps[0].loss;
    let plain: f64 = batch()
        .records
        .iter()
        .map(|r| student.next_token_loss(r).unwrap() as f64)
        .sum::<f64>()
        / 4.0;
    assert!((first - plain).abs() < 1e-5, "{first} vs {plain}");
    assert!(log.final_loss().unwrap() < first);
}

#[test]
fn identical_runs_are_bit_identical() {
    let (teacher, student) = pair();
    let cfg = TrainConfig {
        epochs: 1,
        grad_accum: 2,
        lora: lora(),
        ..TrainConfig::recover_lora()
    };
    let a = recover_lora_train(&teacher, &student, &batch(), &cfg, None).unwrap();
    let b = recover_lora_train(&teacher, &student, &batch(), &cfg, None).unwrap();
    assert_eq!(a.0.to_checkpoint().encode(), b.0.to_checkpoint().encode());
    assert_eq!(
        a.1.steps
            .iter()
            .map(|s| s.loss.to_bits())
            .collect::<Vec<_>>(),
        b.1.steps
            .iter()
            .map(|s| s.loss.to_bits())
            .collect::<Vec<_>>()
    );
}
