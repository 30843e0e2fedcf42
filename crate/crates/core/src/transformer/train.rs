use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_graph, AdapterVars, GraphParams, ModelConfig, ModelWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, linear_warmup_schedule, AdamState, AdamW};

/// Cross-entropy of `logits[0..n-1]` against `tokens[1..n]`.
pub fn next_token_loss_graph(
    tape: &mut Tape<f32>,
    config: &ModelConfig,
    params: &GraphParams,
    adapters: &AdapterVars,
    tokens: &[u32],
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let n = tokens.len();
    let logits = forward_graph(tape, config, params, adapters, &tokens[..n - 1])?;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    Ok(tape.cross_entropy(logits, &targets)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    /// Packed sequences per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Packs whole `BOS…EOS` documents, starting at `start`, into one window of
/// `len` tokens.
pub(crate) fn pack_window(corpus: &[Vec<u32>], start: usize, len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len);
    let mut i = start;
    while out.len() < len {
        out.extend_from_slice(&corpus[i % corpus.len()]);
        i += 1;
    }
    out.truncate(len);
    out
}

/// Pretrains a model from scratch on `corpus` (a list of tokenised documents).
///
/// Every step draws `batch_size` windows of `max_seq_len` tokens, each
/// starting at a document boundary. Deterministic for a given seed.
pub fn train_teacher(
    config: &ModelConfig,
    corpus: &[Vec<u32>],
    tcfg: &TeacherTrainConfig,
) -> Result<ModelWeights> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let mut weights = ModelWeights::init(config, tcfg.seed)?;
    if tcfg.steps == 0 {
        return Ok(weights);
    }
    if tcfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let hp = AdamW {
        weight_decay: tcfg.weight_decay,
        ..AdamW::new(tcfg.lr)?
    };
    let mut states: Vec<AdamState<f32>> = weights
        .iter()
        .map(|(_, t)| AdamState::new(t.numel()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7EAC_4E55);
    for step in 0..tcfg.steps {
        let mut sum: Vec<Vec<f32>> = weights.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for _ in 0..tcfg.batch_size {
            let start = rng.random_range(0..corpus.len());
            let window = pack_window(corpus, start, config.max_seq_len + 1);
            let mut tape = Tape::new();
            let params = GraphParams::bind(&mut tape, &weights, |_| true);
            let loss =
                next_token_loss_graph(&mut tape, config, &params, &AdapterVars::new(), &window)?;
            tape.backward(loss)?;
            for (acc, (_, var)) in sum.iter_mut().zip(params.iter()) {
                if let Some(g) = tape.grad(var) {
                    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
        let inv = 1.0 / tcfg.batch_size as f32;
        let mult = linear_warmup_schedule(step, tcfg.warmup_steps, tcfg.steps);
        for (((_, w), g), st) in weights.iter_mut().zip(&mut sum).zip(&mut states) {
            g.iter_mut().for_each(|v| *v *= inv);
            adamw_step(w.data_mut(), g, st, &hp, mult)?;
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{ByteTokenizer, VOCAB_SIZE};
    use crate::transformer::Transformer;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 48,
            max_seq_len: 24,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    fn corpus() -> Vec<Vec<u32>> {
        ["the cat sat.", "a dog ran.", "1+2=3"]
            .iter()
            .map(|s| ByteTokenizer.encode_document(s.as_bytes()))
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let tcfg = TeacherTrainConfig {
            steps: 0,
            seed: 11,
            ..Default::default()
        };
        let w = train_teacher(&small(), &corpus(), &tcfg).unwrap();
        assert_eq!(w, ModelWeights::init(&small(), 11).unwrap());
    }

    #[test]
    fn empty_corpus_rejected() {
        let err = train_teacher(&small(), &[], &TeacherTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let tcfg = TeacherTrainConfig {
            steps: 3,
            batch_size: 2,
            seed: 5,
            warmup_steps: 1,
            ..Default::default()
        };
        let a = train_teacher(&small(), &corpus(), &tcfg).unwrap();
        let b = train_teacher(&small(), &corpus(), &tcfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelWeights::init(&small(), 5).unwrap());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = Transformer::init(ModelConfig::desk(), 0).unwrap();
        let doc = ByteTokenizer.encode_document(b"the quick brown fox jumps over 12+7=19");
        let loss = m.next_token_loss(&doc).unwrap();
        assert!((loss - (VOCAB_SIZE as f32).ln()).abs() < 0.3, "loss {loss}");
    }

    #[test]
    fn short_sequence_rejected() {
        let m = Transformer::init(small(), 0).unwrap();
        assert!(matches!(
            m.next_token_loss(&[1]),
            Err(Error::SequenceTooShort { len: 1, min: 2 })
        ));
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let cfg = small();
        let mut weights = ModelWeights::init(&cfg, 1).unwrap();
        let batch = pack_window(&corpus(), 0, cfg.max_seq_len);
        let hp = AdamW::new(3e-3).unwrap();
        let mut states: Vec<AdamState<f32>> = weights
            .iter()
            .map(|(_, t)| AdamState::new(t.numel()))
            .collect();
        let mut last = f32::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let params = GraphParams::bind(&mut tape, &weights, |_| true);
            let loss = next_token_loss_graph(&mut tape, &cfg, &params, &AdapterVars::new(), &batch)
                .unwrap();
            let value = tape.value(loss).data()[0];
            assert!(value < last, "loss went from {last} to {value}");
            last = value;
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f32>> = params
                .iter()
                .map(|(_, v)| tape.grad(v).unwrap().to_vec())
                .collect();
            for (((_, w), g), st) in weights.iter_mut().zip(&grads).zip(&mut states) {
                adamw_step(w.data_mut(), g, st, &hp, 1.0).unwrap();
            }
        }
        assert!(last < 2.0, "final loss {last}");
    }
}
