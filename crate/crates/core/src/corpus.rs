//! Seeded procedural text: short sentences from a small grammar mixed with
//! arithmetic facts such as `12+7=19` and copied letter strings.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{DataSource, Dataset};
use crate::tokenizer::{ByteTokenizer, VOCAB_SIZE};

const DETERMINERS: &[&str] = &["the", "a", "every", "my", "one"];
const ADJECTIVES: &[&str] = &[
    "red", "small", "old", "quick", "green", "happy", "dark", "tall",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "tree", "house", "river", "child", "boat",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "chases", "hears", "follows", "draws",
];
const PLACES: &[&str] = &["near", "under", "behind", "beside"];

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn noun_phrase(rng: &mut impl Rng, out: &mut String) {
    out.push_str(pick(rng, DETERMINERS));
    out.push(' ');
    if rng.random_bool(0.5) {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

fn sentence(rng: &mut impl Rng, out: &mut String) {
    let start = out.len();
    noun_phrase(rng, out);
    out.push(' ');
    out.push_str(pick(rng, VERBS));
    out.push(' ');
    noun_phrase(rng, out);
    if rng.random_bool(0.3) {
        out.push(' ');
        out.push_str(pick(rng, PLACES));
        out.push(' ');
        noun_phrase(rng, out);
    }
    out.push('.');
    out[start..start + 1].make_ascii_uppercase();
}

fn arithmetic(rng: &mut impl Rng, out: &mut String) {
    let a: u32 = rng.random_range(0..50);
    let b: u32 = rng.random_range(0..50);
    if rng.random_bool(0.5) {
        out.push_str(&format!("{a}+{b}={}.", a + b));
    } else {
        let (hi, lo) = (a.max(b), a.min(b));
        out.push_str(&format!("{hi}-{lo}={}.", hi - lo));
    }
}

/// A short random letter string and its copy, such as `qxe>qxe.`.
fn echo(rng: &mut impl Rng, out: &mut String) {
    let word: String = (0..rng.random_range(4..=8))
        .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
        .collect();
    out.push_str(&format!("{word}>{word}."));
}

/// Longest document text in bytes, so a framed document fits a 128-token context.
pub const MAX_DOC_BYTES: usize = 110;

/// One document of one to three sentences or sums.
pub fn document(rng: &mut impl Rng) -> String {
    let mut out = String::new();
    for _ in 0..rng.random_range(1..=3) {
        let mut item = String::new();
        match rng.random_range(0..4) {
            0 => sentence(rng, &mut item),
            1 => arithmetic(rng, &mut item),
            _ => echo(rng, &mut item),
        }
        let sep = usize::from(!out.is_empty());
        if out.len() + sep + item.len() > MAX_DOC_BYTES {
            break;
        }
        if sep == 1 {
            out.push(' ');
        }
        out.push_str(&item);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Pretraining documents for the teacher.
    pub train_docs: usize,
    /// Labeled documents for supervised finetuning.
    pub labeled_docs: usize,
    /// Evaluation documents, disjoint from both of the above.
    pub holdout_docs: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_docs: 20_000,
            labeled_docs: 4_000,
            holdout_docs: 400,
            seed: 0,
        }
    }
}

/// Tokenised `BOS … EOS` documents for each split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<Vec<u32>>,
    pub labeled: Vec<Vec<u32>>,
    pub holdout: Vec<Vec<u32>>,
}

impl CorpusSplits {
    /// Generates all three splits. The holdout split contains no document
    /// text that also occurs in `train` or `labeled`.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut split = |stream: u64, count: usize, unique: bool| -> Result<Vec<Vec<u32>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            let mut docs = Vec::with_capacity(count);
            let mut attempts = 0usize;
            while docs.len() < count {
                attempts += 1;
                if attempts > count.saturating_mul(50).max(1000) {
                    return Err(Error::Invalid(format!(
                        "could not draw {count} distinct documents for split {stream}"
                    )));
                }
                let text = document(&mut rng);
                if unique {
                    if seen.contains(&text) {
                        continue;
                    }
                } else {
                    seen.insert(text.clone());
                }
                docs.push(ByteTokenizer.encode_document(text.as_bytes()));
            }
            Ok(docs)
        };
        let train = split(0, cfg.train_docs, false)?;
        let labeled = split(1, cfg.labeled_docs, false)?;
        let holdout = split(2, cfg.holdout_docs, true)?;
        Ok(Self {
            train,
            labeled,
            holdout,
        })
    }

    pub fn dataset(&self, split: &str, seed: u64) -> Result<Dataset> {
        let records = match split {
            "train" => &self.train,
            "labeled" => &self.labeled,
            "holdout" => &self.holdout,
            other => return Err(Error::Invalid(format!("unknown corpus split {other:?}"))),
        };
        Ok(Dataset::new(
            records.clone(),
            VOCAB_SIZE,
            seed,
            None,
            DataSource::Corpus {
                split: split.to_string(),
            },
        ))
    }
}
