//! Synthetic distillation data sampled from the teacher.
//!
//! Every record starts at BOS. The next `n_greedy` tokens are the teacher's
//! argmax continuation (identical across records); the rest are drawn from
//! its softmax at the configured temperature until EOS or `max_len`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{Checkpoint, DataSource, Dataset};
use crate::tokenizer::{BOS, EOS};
use crate::transformer::{IncrementalDecoder, ModelConfig, Transformer};

/// Temperatures at or below this decode greedily.
pub const MIN_TEMPERATURE: f64 = 1e-4;

/// Records decoded together through one KV cache.
const DECODE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_greedy: usize,
    /// Record length cap including BOS; `None` uses the teacher's context length.
    pub max_len: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
    pub n_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_greedy: 5,
            max_len: None,
            temperature: 1.0,
            seed: 0,
            n_samples: 4_000,
        }
    }
}

impl SamplerConfig {
    fn resolved_len(&self, teacher: &ModelConfig) -> Result<usize> {
        let max_len = self.max_len.unwrap_or(teacher.max_seq_len);
        if max_len > teacher.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: max_len,
                max: teacher.max_seq_len,
            });
        }
        if self.n_greedy == 0 || self.n_greedy > max_len {
            return Err(Error::Invalid(format!(
                "n_greedy must lie in 1..={max_len}, got {}",
                self.n_greedy
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(max_len)
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= MIN_TEMPERATURE {
        return argmax(logits);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// BOS followed by up to `n` argmax tokens, stopping after EOS.
pub fn greedy_decode(model: &Transformer, n: usize) -> Result<Vec<u32>> {
    let mut out = vec![BOS];
    let mut dec = IncrementalDecoder::new(model, 1);
    while out.len() <= n && out.len() < model.config.max_seq_len {
        let logits = dec.step(&[*out.last().unwrap_or(&BOS)])?;
        let next = argmax(&logits[0]) as u32;
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Samples `cfg.n_samples` records from `teacher` for distilling into a model
/// with `student` config. Record `i` draws from stream `i` of a ChaCha8 generator
/// seeded with `cfg.seed`, so the output does not depend on batching.
pub fn generate_corpus(
    teacher: &Transformer,
    student: &ModelConfig,
    cfg: &SamplerConfig,
) -> Result<Dataset> {
    generate_with_fingerprint(
        teacher,
        student,
        cfg,
        Checkpoint::model(teacher.config.clone(), teacher.weights.clone()).fingerprint(),
    )
}

/// As [`generate_corpus`], with a precomputed teacher fingerprint for the header.
pub fn generate_with_fingerprint(
    teacher: &Transformer,
    student: &ModelConfig,
    cfg: &SamplerConfig,
    fingerprint: String,
) -> Result<Dataset> {
    if teacher.config.vocab_size != student.vocab_size {
        return Err(Error::VocabMismatch {
            data: teacher.config.vocab_size,
            model: student.vocab_size,
        });
    }
    let max_len = cfg.resolved_len(&teacher.config)?;
    let head = greedy_decode(teacher, cfg.n_greedy.min(max_len - 1))?;
    let mut records = Vec::with_capacity(cfg.n_samples);
    for start in (0..cfg.n_samples).step_by(DECODE_BATCH) {
        let end = (start + DECODE_BATCH).min(cfg.n_samples);
        records.extend(decode_batch(teacher, cfg, max_len, &head, start..end)?);
    }
    let mut ds = Dataset::new(
        records,
        teacher.config.vocab_size,
        cfg.seed,
        Some(fingerprint),
        DataSource::Synthetic {
            n_greedy: cfg.n_greedy,
            temperature: cfg.temperature,
        },
    );
    ds.header.max_len = max_len as u32;
    Ok(ds)
}

fn decode_batch(
    teacher: &Transformer,
    cfg: &SamplerConfig,
    max_len: usize,
    head: &[u32],
    range: std::ops::Range<usize>,
) -> Result<Vec<Vec<u32>>> {
    let n = range.len();
    let mut rngs: Vec<ChaCha8Rng> = range
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut records: Vec<Vec<u32>> = vec![head.to_vec(); n];
    if head.last() == Some(&EOS) || head.len() >= max_len {
        return Ok(records);
    }
    // Rows still generating, as indices into `records`.
    let mut live: Vec<usize> = (0..n).collect();
    let mut dec = IncrementalDecoder::new(teacher, n);
    for &t in &head[..head.len() - 1] {
        dec.step(&vec![t; n])?;
    }
    while !live.is_empty() {
        let feed: Vec<u32> = live
            .iter()
            .map(|&r| *records[r].last().unwrap_or(&BOS))
            .collect();
        let logits = dec.step(&feed)?;
        let mut keep = vec![true; live.len()];
        for (j, &r) in live.iter().enumerate() {
            let next = sample(&logits[j], cfg.temperature, &mut rngs[r]) as u32;
            records[r].push(next);
            keep[j] = next != EOS && records[r].len() < max_len;
        }
        if keep.iter().any(|k| !k) {
            dec.retain(&keep);
            let mut it = keep.iter();
            live.retain(|_| *it.next().unwrap_or(&false));
        }
    }
    Ok(records)
}

/// Nested prefix splits: the split for a smaller fraction is a prefix of
/// the one for a larger fraction.
pub fn split_sizes(corpus: &Dataset, fractions: &[f64]) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Invalid(format!(
            "fractions {fractions:?} must be non-negative and sum to at most 1"
        )));
    }
    let sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * corpus.len() as f64).round() as usize)
        .collect();
    prefix_sizes(corpus, &sizes)
}

/// Nested prefixes of absolute record counts.
pub fn prefix_sizes(corpus: &Dataset, sizes: &[usize]) -> Result<Vec<Dataset>> {
    sizes
        .iter()
        .map(|&n| {
            if n == 0 || n > corpus.len() {
                Err(Error::Invalid(format!(
                    "split of {n} records from a corpus of {}",
                    corpus.len()
                )))
            } else {
                Ok(corpus.prefix(n))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VOCAB_SIZE;

    fn tiny() -> Transformer {
        let cfg = ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 24,
            max_seq_len: 20,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        };
        Transformer::init(cfg, 4).unwrap()
    }

    fn sampler(seed: u64) -> SamplerConfig {
        SamplerConfig {
            seed,
            n_samples: 70,
            ..Default::default()
        }
    }

    #[test]
    fn greedy_head_shared_by_every_record() {
        let m = tiny();
        let ds = generate_corpus(&m, &m.config, &sampler(1)).unwrap();
        let head = greedy_decode(&m, 5).unwrap();
        assert_eq!(ds.len(), 70);
        for r in &ds.records {
            assert_eq!(&r[..head.len()], head.as_slice());
            assert!(r.len() <= 20);
            assert!(r.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }

    #[test]
    fn seeds_reproduce_and_differ() {
        let m = tiny();
        let a = generate_corpus(&m, &m.config, &sampler(1)).unwrap();
        let b = generate_corpus(&m, &m.config, &sampler(1)).unwrap();
        assert_eq!(a.encode(), b.encode());
        let c = generate_corpus(&m, &m.config, &sampler(2)).unwrap();
        assert_ne!(a.records, c.records);
        assert!(a
            .records
            .iter()
            .zip(&c.records)
            .all(|(x, y)| x[..6] == y[..6]));
    }

    #[test]
    fn clamped_temperature_is_greedy() {
        let m = tiny();
        let cfg = SamplerConfig {
            temperature: 1e-9,
            n_samples: 3,
            ..sampler(5)
        };
        let ds = generate_corpus(&m, &m.config, &cfg).unwrap();
        let full = greedy_decode(&m, 19).unwrap();
        for r in &ds.records {
            assert_eq!(r, &full);
        }
    }

    #[test]
    fn record_order_is_independent_of_batching() {
        let m = tiny();
        let cfg = sampler(3);
        let ds = generate_corpus(&m, &m.config, &cfg).unwrap();
        let head = greedy_decode(&m, 5).unwrap();
        let single = decode_batch(&m, &cfg, 20, &head, 66..67).unwrap();
        assert_eq!(single[0], ds.records[66]);
    }

    #[test]
    fn rejects_bad_requests() {
        let m = tiny();
        let mut student = m.config.clone();
        student.vocab_size = 300;
        assert!(matches!(
            generate_corpus(&m, &student, &sampler(0)),
            Err(Error::VocabMismatch { .. })
        ));
        let long = SamplerConfig {
            max_len: Some(21),
            ..sampler(0)
        };
        assert!(matches!(
            generate_corpus(&m, &m.config, &long),
            Err(Error::SequenceTooLong { .. })
        ));
        let zero = SamplerConfig {
            n_greedy: 0,
            ..sampler(0)
        };
        assert!(generate_corpus(&m, &m.config, &zero).is_err());
    }

    #[test]
    fn nested_prefix_splits() {
        let m = tiny();
        let ds = generate_corpus(&m, &m.config, &sampler(0)).unwrap();
        let one = split_sizes(&ds, &[1.0]).unwrap();
        assert_eq!(one[0], ds);
        let parts = split_sizes(&ds, &[0.25, 0.5]).unwrap();
        assert_eq!(parts[0].records[..], parts[1].records[..parts[0].len()]);
        assert!(split_sizes(&ds, &[0.8, 0.5]).is_err());
        assert!(split_sizes(&ds, &[0.0]).is_err());
    }
}
