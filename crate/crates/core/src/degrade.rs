//! Silent weight corruption of a saved checkpoint.
//!
//! Matched tensors receive additive Gaussian noise whose standard deviation
//! is `c` times the tensor's own empirical standard deviation, so the damage
//! scales with the weights rather than with an absolute constant.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::match_targets;
use crate::persist::{l2_distance, Checkpoint};
use crate::transformer::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    GaussianAdditive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub target_patterns: Vec<String>,
    pub noise_kind: NoiseKind,
    /// Noise standard deviation as a multiple of each tensor's own.
    pub relative_scale: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            target_patterns: vec!["*.attn.k_proj".into(), "*.attn.v_proj".into()],
            noise_kind: NoiseKind::GaussianAdditive,
            relative_scale: 0.5,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.relative_scale >= 0.0 && self.relative_scale.is_finite()) {
            return Err(Error::Invalid(format!(
                "relative_scale must be a finite value >= 0, got {}",
                self.relative_scale
            )));
        }
        if self.target_patterns.is_empty() {
            return Err(Error::Invalid("no corruption target patterns".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDrift {
    pub name: String,
    /// `‖W′ − W‖₂`, accumulated in f64.
    pub l2: f64,
    /// `‖W′ − W‖₂ / ‖W‖₂`.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub seed: u64,
    pub spec: CorruptionSpec,
    pub tensors: Vec<TensorDrift>,
}

impl CorruptionReport {
    /// Frobenius norm of the whole perturbation.
    pub fn total_l2(&self) -> f64 {
        self.tensors.iter().map(|t| t.l2 * t.l2).sum::<f64>().sqrt()
    }

    pub fn render_table(&self) -> String {
        let width = self
            .tensors
            .iter()
            .map(|t| t.name.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!("{:<width$}  {:>10}  {:>10}\n", "tensor", "L2", "relative");
        for t in &self.tensors {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.2}  {:>10.4}",
                t.name, t.l2, t.relative_change
            );
        }
        let _ = writeln!(out, "{:<width$}  {:>10.2}", "total", self.total_l2());
        out
    }
}

fn population_std(data: &[f32]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies the noise in memory. Tensors are visited in directory order and
/// share one seeded stream.
pub fn corrupt_weights(
    weights: &ModelWeights,
    spec: &CorruptionSpec,
) -> Result<(ModelWeights, CorruptionReport)> {
    spec.validate()?;
    let targets = match_targets(weights.names(), &spec.target_patterns)?;
    let mut out = weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensors = Vec::with_capacity(targets.len());
    for name in targets {
        let original = weights.require(&name)?;
        let std = match population_std(original.data()) {
            s if s > 0.0 => s,
            _ => 1.0,
        };
        let sigma = spec.relative_scale * std;
        let t = out
            .get_mut(&name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        for w in t.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *w = (*w as f64 + sigma * n) as f32;
        }
        let l2 = l2_distance(original.data(), t.data());
        let base = original
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let relative_change = match (l2, base) {
            (0.0, _) => 0.0,
            (_, 0.0) => f64::INFINITY,
            (l, b) => l / b,
        };
        tensors.push(TensorDrift {
            name,
            l2,
            relative_change,
        });
    }
    Ok((
        out,
        CorruptionReport {
            seed: spec.seed,
            spec: spec.clone(),
            tensors,
        },
    ))
}

/// Loads a checkpoint, perturbs the matched tensors and saves the result.
/// Header fields other than the tensor data are carried over unchanged.
pub fn corrupt(
    input: impl AsRef<Path>,
    spec: &CorruptionSpec,
    output: impl AsRef<Path>,
) -> Result<CorruptionReport> {
    let ckpt = Checkpoint::load(input)?;
    let (weights, report) = corrupt_weights(&ckpt.weights, spec)?;
    Checkpoint { weights, ..ckpt }.save(output)?;
    Ok(report)
}

/// Scores for the intact and corrupted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationCheck {
    pub teacher: f64,
    pub corrupted: f64,
}

impl DegradationCheck {
    /// True when the corrupted model does not score below the teacher, which
    /// leaves nothing to recover.
    pub fn is_flagged(&self) -> bool {
        self.corrupted >= self.teacher
    }
}
