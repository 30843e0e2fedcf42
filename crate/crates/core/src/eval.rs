//! Evaluation tasks, composite scores and the accuracy-recovery metric.
//!
//! The composite score of a model is the mean of its task scores:
//!
//! * multiple choice: percent of items whose gold continuation has the
//!   strictly highest mean per-token log-likelihood;
//! * held-out perplexity: `100 · P_ref / P`, clipped to `[0, 100]`, where
//!   `P_ref` is the teacher's perplexity on the same records.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::DegradationCheck;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{LanguageModel, Transformer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub context: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalTask {
    HeldOutPerplexity {
        name: String,
        records: Vec<Vec<u32>>,
    },
    MultipleChoice {
        name: String,
        k: usize,
        seed: u64,
        items: Vec<ChoiceItem>,
    },
}

impl EvalTask {
    pub fn name(&self) -> &str {
        match self {
            Self::HeldOutPerplexity { name, .. } | Self::MultipleChoice { name, .. } => name,
        }
    }
}

fn cut_point(rec: &[u32], rng: &mut ChaCha8Rng) -> usize {
    let anchors: Vec<usize> = (1..rec.len() - 1)
        .filter(|&i| rec[i - 1] == u32::from(b'>') || rec[i - 1] == u32::from(b'='))
        .collect();
    if anchors.is_empty() {
        rec.len() / 2
    } else {
        anchors[rng.random_range(0..anchors.len())]
    }
}

/// Continuation-ranking items built from held-out records.
///
/// Each record is cut just after a randomly chosen `>` or `=` byte, so the
/// gold candidate starts with a copy or a sum that only the context
/// determines; records without either byte are cut in half. The gold
/// candidate is the verbatim remainder. Distractors alternate between the
/// remainder of another record, cut the same way, and a token shuffle of the
/// gold continuation. All candidates of an item are distinct and the gold
/// slot is drawn at random.
pub fn build_choice_task(
    holdout: &[Vec<u32>],
    k: usize,
    n_items: usize,
    seed: u64,
) -> Result<EvalTask> {
    if k < 2 {
        return Err(Error::Invalid(format!(
            "multiple choice needs k >= 2, got {k}"
        )));
    }
    let usable: Vec<usize> = (0..holdout.len())
        .filter(|&i| holdout[i].len() >= 4)
        .collect();
    if usable.len() < 2 {
        return Err(Error::Invalid(
            "holdout has too few records for choice items".into(),
        ));
    }
    // No item is longer than the longest record, so items fit any model that fits the records.
    let longest = holdout.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = usable.clone();
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n_items);
    for &r in &order {
        if items.len() == n_items {
            break;
        }
        let rec = &holdout[r];
        let split = cut_point(rec, &mut rng);
        let gold = rec[split..].to_vec();
        let mut candidates = vec![gold.clone()];
        let mut tries = 0;
        while candidates.len() < k && tries < 50 * k {
            tries += 1;
            let cand = if candidates.len() % 2 == 1 {
                let o = usable[rng.random_range(0..usable.len())];
                if o == r {
                    continue;
                }
                let c = holdout[o][cut_point(&holdout[o], &mut rng)..].to_vec();
                if split + c.len() > longest {
                    continue;
                }
                c
            } else {
                let mut c = gold.clone();
                c.shuffle(&mut rng);
                c
            };
            if !candidates.contains(&cand) {
                candidates.push(cand);
            }
        }
        if candidates.len() < k {
            continue;
        }
        let slot = rng.random_range(0..k);
        candidates.swap(0, slot);
        items.push(ChoiceItem {
            context: rec[..split].to_vec(),
            candidates,
            gold: slot,
        });
    }
    if items.len() < n_items {
        return Err(Error::Invalid(format!(
            "holdout yields only {} of {n_items} choice items",
            items.len()
        )));
    }
    Ok(EvalTask::MultipleChoice {
        name: format!("choice_k{k}"),
        k,
        seed,
        items,
    })
}

fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[idx] as f64 - lse
}

fn sum_log_probs(logits: &Tensor<f32>, tokens: &[u32], from: usize) -> f64 {
    (from..tokens.len())
        .map(|t| log_softmax_at(logits.row(t - 1), tokens[t] as usize))
        .sum()
}

/// `exp` of the mean next-token negative log-likelihood over all records.
pub fn perplexity(model: &dyn LanguageModel, records: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for r in records {
        if r.len() < 2 {
            return Err(Error::SequenceTooShort {
                len: r.len(),
                min: 2,
            });
        }
        let logits = model.logits(&r[..r.len() - 1])?;
        nll -= sum_log_probs(&logits, r, 1);
        count += r.len() - 1;
    }
    if count == 0 {
        return Err(Error::Invalid("perplexity over no tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Mean per-token log-likelihood of `candidate` following `context`.
pub fn continuation_score(
    model: &dyn LanguageModel,
    context: &[u32],
    candidate: &[u32],
) -> Result<f64> {
    if candidate.is_empty() || context.is_empty() {
        return Err(Error::Invalid("empty context or candidate".into()));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(candidate);
    let logits = model.logits(&seq[..seq.len() - 1])?;
    Ok(sum_log_probs(&logits, &seq, context.len()) / candidate.len() as f64)
}

/// Percent of items where the gold candidate scores strictly highest.
pub fn choice_accuracy(model: &dyn LanguageModel, items: &[ChoiceItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("no choice items".into()));
    }
    let mut correct = 0usize;
    for item in items {
        let scores = item
            .candidates
            .iter()
            .map(|c| continuation_score(model, &item.context, c))
            .collect::<Result<Vec<_>>>()?;
        let gold = scores[item.gold];
        if scores
            .iter()
            .enumerate()
            .all(|(i, &s)| i == item.gold || s < gold)
        {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / items.len() as f64)
}

pub fn perplexity_score(perplexity: f64, reference: f64) -> f64 {
    (100.0 * (reference / perplexity)).clamp(0.0, 100.0)
}

/// `AR% = (E* − E_S) / |E_S − E_T| · 100`.
pub fn ar_percent(e_s: f64, e_t: f64, e_star: f64) -> Result<f64> {
    if e_s == e_t {
        return Err(Error::NoDegradation(e_s));
    }
    Ok((e_star - e_s) / (e_s - e_t).abs() * 100.0)
}

/// Tasks plus the teacher perplexity used to score the perplexity task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub tasks: Vec<EvalTask>,
    pub reference_perplexity: Option<f64>,
    pub teacher_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub choice_items: usize,
    pub choices: usize,
    pub perplexity_records: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            choice_items: 200,
            choices: 4,
            perplexity_records: 200,
            seed: 0,
        }
    }
}

impl EvalSuite {
    /// Perplexity on the first `perplexity_records` holdout records and a
    /// choice task over the whole holdout.
    pub fn build(holdout: &[Vec<u32>], cfg: &EvalConfig) -> Result<Self> {
        let n = cfg.perplexity_records.min(holdout.len());
        if n == 0 {
            return Err(Error::Invalid("empty holdout".into()));
        }
        Ok(Self {
            tasks: vec![
                build_choice_task(holdout, cfg.choices, cfg.choice_items, cfg.seed)?,
                EvalTask::HeldOutPerplexity {
                    name: "heldout_ppl".into(),
                    records: holdout[..n].to_vec(),
                },
            ],
            reference_perplexity: None,
            teacher_fingerprint: None,
        })
    }

    /// Records the teacher's perplexity as the scoring reference.
    pub fn calibrate(&mut self, teacher: &Transformer) -> Result<()> {
        let records = self
            .tasks
            .iter()
            .find_map(|t| match t {
                EvalTask::HeldOutPerplexity { records, .. } => Some(records),
                _ => None,
            })
            .ok_or_else(|| Error::Invalid("suite has no perplexity task".into()))?;
        self.reference_perplexity = Some(perplexity(teacher, records)?);
        self.teacher_fingerprint = Some(crate::distill::teacher_fingerprint(teacher));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub score: f64,
    /// Raw perplexity for perplexity tasks.
    pub raw: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArBlock {
    pub e_s: f64,
    pub e_t: f64,
    pub e_star: f64,
    pub ar_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub method: String,
    pub trainable_params: usize,
    pub teacher_fingerprint: Option<String>,
    pub tasks: Vec<TaskScore>,
    pub average: f64,
    pub ar: Option<ArBlock>,
}

impl EvalReport {
    pub fn perplexity(&self) -> Option<f64> {
        self.tasks.iter().find_map(|t| t.raw)
    }

    /// Adds the AR% block, with this report's average as `E*`.
    pub fn with_ar(mut self, e_s: f64, e_t: f64) -> Result<Self> {
        let e_star = self.average;
        self.ar = Some(ArBlock {
            e_s,
            e_t,
            e_star,
            ar_percent: ar_percent(e_s, e_t, e_star)?,
        });
        Ok(self)
    }
}

/// Scores `model` on every task of a calibrated suite.
pub fn evaluate(model: &dyn LanguageModel, suite: &EvalSuite, label: &str) -> Result<EvalReport> {
    if suite.tasks.is_empty() {
        return Err(Error::Invalid("no evaluation tasks".into()));
    }
    let mut tasks = Vec::with_capacity(suite.tasks.len());
    for task in &suite.tasks {
        let score = match task {
            EvalTask::MultipleChoice { name, items, .. } => TaskScore {
                name: name.clone(),
                score: choice_accuracy(model, items)?,
                raw: None,
            },
            EvalTask::HeldOutPerplexity { name, records } => {
                let reference = suite
                    .reference_perplexity
                    .ok_or_else(|| Error::Invalid("suite has no reference perplexity".into()))?;
                let p = perplexity(model, records)?;
                TaskScore {
                    name: name.clone(),
                    score: perplexity_score(p, reference),
                    raw: Some(p),
                }
            }
        };
        tasks.push(score);
    }
    let average = tasks.iter().map(|t| t.score).sum::<f64>() / tasks.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        method: String::new(),
        trainable_params: 0,
        teacher_fingerprint: suite.teacher_fingerprint.clone(),
        tasks,
        average,
        ar: None,
    })
}

/// Composite scores of the teacher and the corrupted model.
pub fn verify_degradation(
    teacher: &Transformer,
    corrupted: &Transformer,
    suite: &EvalSuite,
) -> Result<DegradationCheck> {
    if teacher.config != corrupted.config {
        return Err(Error::ConfigMismatch(
            "teacher and corrupted configs differ".into(),
        ));
    }
    Ok(DegradationCheck {
        teacher: evaluate(teacher, suite, "teacher")?.average,
        corrupted: evaluate(corrupted, suite, "corrupted")?.average,
    })
}

/// Joins reports into one table with fixed columns: model, method,
/// trainable parameters, each task, Avg, AR%.
pub fn join_reports(reports: &[EvalReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no reports to join".into()))?;
    for r in &reports[1..] {
        if r.teacher_fingerprint != first.teacher_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: format!("teacher of report {:?}", r.label),
                expected: first.teacher_fingerprint.clone().unwrap_or_default(),
                actual: r.teacher_fingerprint.clone().unwrap_or_default(),
            });
        }
    }
    let names: Vec<&str> = first.tasks.iter().map(|t| t.name.as_str()).collect();
    let label_w = reports
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let method_w = reports
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:<label_w$}  {:<method_w$}  {:>10}",
        "model", "method", "params"
    );
    for n in &names {
        let _ = write!(out, "  {n:>12}");
    }
    let _ = writeln!(out, "  {:>8}  {:>8}", "Avg", "AR%");
    for r in reports {
        let _ = write!(
            out,
            "{:<label_w$}  {:<method_w$}  {:>10}",
            r.label, r.method, r.trainable_params
        );
        for n in &names {
            match r.tasks.iter().find(|t| t.name == *n) {
                Some(t) => {
                    let _ = write!(out, "  {:>12.2}", t.score);
                }
                None => {
                    let _ = write!(out, "  {:>12}", "-");
                }
            }
        }
        let ar =
            r.ar.map_or("-".to_string(), |a| format!("{:.2}", a.ar_percent));
        let _ = writeln!(out, "  {:>8.2}  {:>8}", r.average, ar);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<(usize, f64)>,
}

impl SweepCurve {
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("size\tar_percent\n");
        for (n, ar) in &self.points {
            let _ = writeln!(out, "{n}\t{ar:.4}");
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
#[error("sweep failed at size {size}: {source}")]
pub struct SweepError {
    pub size: usize,
    pub partial: SweepCurve,
    #[source]
    pub source: Error,
}

/// Runs `point` for each size in order; a failure keeps the points so far.
pub fn sweep_ar(
    sizes: &[usize],
    mut point: impl FnMut(usize) -> Result<f64>,
) -> std::result::Result<SweepCurve, SweepError> {
    let mut curve = SweepCurve::default();
    for &size in sizes {
        match point(size) {
            Ok(ar) => curve.points.push((size, ar)),
            Err(source) => {
                return Err(SweepError {
                    size,
                    partial: curve,
                    source,
                })
            }
        }
    }
    Ok(curve)
}
