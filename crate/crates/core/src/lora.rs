//! Low-rank adapters on frozen projection weights.
//!
//! For a projection with frozen weight `W` mapping `k` inputs to `d`
//! outputs, an adapter holds `A ∈ R^{r×k}` and `B ∈ R^{d×r}` and the layer
//! computes `Y = W X + α B A X`. `α` is applied as a plain multiplier (no
//! `α / r` rescaling). `B` starts at zero so a fresh adapter leaves the
//! model's outputs bit-identical.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::persist::Checkpoint;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{
    forward_graph, AdapterVars, GraphParams, LanguageModel, LowRankVars, ModelConfig, ModelWeights,
    Transformer,
};

/// Which projections receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSet {
    /// Key and value projections.
    Kv,
    /// Every attention and MLP projection.
    AttnMlp,
    /// Explicit glob patterns over tensor names.
    Custom(Vec<String>),
}

impl TargetSet {
    pub fn patterns(&self) -> Vec<String> {
        let p = |roles: &[&str]| roles.iter().map(|r| format!("*.{r}")).collect();
        match self {
            Self::Kv => p(&["attn.k_proj", "attn.v_proj"]),
            Self::AttnMlp => p(&[
                "attn.q_proj",
                "attn.k_proj",
                "attn.v_proj",
                "attn.o_proj",
                "mlp.gate_proj",
                "mlp.up_proj",
                "mlp.down_proj",
            ]),
            Self::Custom(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: TargetSet,
    pub init_std_a: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LoraConfig {
    /// Rank 8, α 8 on K/V: sized for the desk model's 32-wide heads.
    pub fn desk() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            targets: TargetSet::Kv,
            init_std_a: 0.02,
            seed: 0,
        }
    }

    /// Rank 64, α 64, the setting used on billion-parameter models. Too large
    /// for the desk model's K/V projections; kept for parity runs on wider configs.
    pub fn full_scale() -> Self {
        Self {
            rank: 64,
            alpha: 64.0,
            ..Self::desk()
        }
    }
}

/// Matches tensor names against glob patterns, in directory order.
pub fn match_targets<'a>(
    names: impl Iterator<Item = &'a str>,
    patterns: &[String],
) -> Result<Vec<String>> {
    let compiled = patterns
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| Error::Invalid(format!("pattern {p:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<&str> = names.collect();
    for (pat, src) in compiled.iter().zip(patterns) {
        if !names.iter().any(|n| pat.matches(n)) {
            return Err(Error::NoMatch(src.clone()));
        }
    }
    Ok(names
        .into_iter()
        .filter(|n| compiled.iter().any(|p| p.matches(n)))
        .map(str::to_string)
        .collect())
}

/// Factors for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `r × in`
    pub a: Tensor<f32>,
    /// `out × r`
    pub b: Tensor<f32>,
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Adapters keyed by target tensor name, plus the config that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub config: LoraConfig,
    adapters: IndexMap<String, Adapter>,
}

impl AdapterSet {
    pub fn get(&self, target: &str) -> Option<&Adapter> {
        self.adapters.get(target)
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Adapter)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(Adapter::param_count).sum()
    }

    /// `{target}.lora_a` / `{target}.lora_b` tensors in stable order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        self.adapters
            .iter()
            .flat_map(|(name, ad)| {
                [
                    (format!("{name}.lora_a"), &ad.a),
                    (format!("{name}.lora_b"), &ad.b),
                ]
            })
            .collect()
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.adapters
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect()
    }

    /// A checkpoint holding only the adapter tensors, with the config in the header.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let weights = self
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint {
            lora: Some(self.config.clone()),
            weights,
            ..Checkpoint::default()
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .lora
            .clone()
            .ok_or_else(|| Error::Invalid("checkpoint carries no lora config".into()))?;
        let mut adapters = IndexMap::new();
        for (name, t) in ckpt.weights.iter() {
            let Some(target) = name.strip_suffix(".lora_a") else {
                continue;
            };
            let b = ckpt.weights.require(&format!("{target}.lora_b"))?;
            adapters.insert(
                target.to_string(),
                Adapter {
                    a: t.clone(),
                    b: b.clone(),
                },
            );
        }
        if adapters.len() * 2 != ckpt.weights.len() {
            return Err(Error::Invalid(
                "adapter checkpoint holds unpaired tensors".into(),
            ));
        }
        Ok(Self { config, adapters })
    }
}

/// `α · (X Aᵀ) Bᵀ`, the adapter's contribution to a projection output.
pub fn low_rank_delta(tape: &mut Tape<f32>, x: Var, lr: &LowRankVars) -> Result<Var> {
    let at = tape.transpose(lr.a)?;
    let xa = tape.matmul(x, at)?;
    let bt = tape.transpose(lr.b)?;
    let xab = tape.matmul(xa, bt)?;
    Ok(tape.scale(xab, lr.alpha))
}

/// `base + α · (X Aᵀ) Bᵀ`.
pub fn add_low_rank(tape: &mut Tape<f32>, x: Var, base: Var, lr: &LowRankVars) -> Result<Var> {
    let delta = low_rank_delta(tape, x, lr)?;
    Ok(tape.add(base, delta)?)
}

/// A frozen base model plus adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    base: Transformer,
    adapters: AdapterSet,
    merged: bool,
}

/// Attaches zero-initialised adapters to every projection matched by `cfg.targets`.
pub fn inject(student: Transformer, cfg: &LoraConfig) -> Result<AdaptedModel> {
    if cfg.rank == 0 {
        return Err(Error::Invalid("lora rank must be at least 1".into()));
    }
    let targets = match_targets(student.weights.names(), &cfg.targets.patterns())?;
    let dist = Normal::new(0.0f32, cfg.init_std_a as f32)
        .map_err(|e| Error::Invalid(format!("init_std_a: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapters = IndexMap::new();
    for name in targets {
        let w = student.weights.require(&name)?;
        let [k, d] = w.shape() else {
            return Err(Error::Invalid(format!(
                "{name} is not a projection matrix (shape {:?})",
                w.shape()
            )));
        };
        let (k, d) = (*k, *d);
        let limit = k.min(d);
        if cfg.rank >= limit {
            return Err(Error::RankTooLarge {
                name,
                rank: cfg.rank,
                limit,
            });
        }
        let a: Vec<f32> = (0..cfg.rank * k).map(|_| dist.sample(&mut rng)).collect();
        let adapter = Adapter {
            a: Tensor::new(&[cfg.rank, k], a)?,
            b: Tensor::zeros(&[d, cfg.rank])?,
        };
        adapters.insert(name, adapter);
    }
    Ok(AdaptedModel {
        base: student,
        adapters: AdapterSet {
            config: cfg.clone(),
            adapters,
        },
        merged: false,
    })
}

impl AdaptedModel {
    /// Re-attaches previously trained adapters to a base model.
    pub fn from_parts(base: Transformer, adapters: AdapterSet) -> Result<Self> {
        for (name, ad) in adapters.iter() {
            let w = base.weights.require(name)?;
            let (k, d) = (w.shape()[0], w.shape()[1]);
            let r = adapters.config.rank;
            if ad.a.shape() != [r, k] || ad.b.shape() != [d, r] {
                return Err(Error::ConfigMismatch(format!(
                    "adapter for {name} has shapes {:?}/{:?}, base is {k}→{d} at rank {r}",
                    ad.a.shape(),
                    ad.b.shape()
                )));
            }
        }
        Ok(Self {
            base,
            adapters,
            merged: false,
        })
    }

    pub fn base(&self) -> &Transformer {
        &self.base
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    pub fn into_adapters(self) -> AdapterSet {
        self.adapters
    }

    /// Adapter tensors in optimizer order, and their total element count.
    pub fn trainable_parameters(&self) -> (Vec<(String, &Tensor<f32>)>, usize) {
        (self.adapters.parameters(), self.adapters.param_count())
    }

    /// Records the base weights (frozen) and adapters on `tape`.
    pub fn bind(
        &self,
        tape: &mut Tape<f32>,
        train_adapters: bool,
    ) -> (GraphParams, AdapterVars, Vec<Var>) {
        let params = GraphParams::bind(tape, &self.base.weights, |_| false);
        let alpha = self.adapters.config.alpha as f32;
        let mut vars = AdapterVars::new();
        let mut order = Vec::new();
        for (name, ad) in self.adapters.iter() {
            let a = tape.leaf(ad.a.clone().with_requires_grad(train_adapters));
            let b = tape.leaf(ad.b.clone().with_requires_grad(train_adapters));
            order.extend([a, b]);
            vars.insert(name.to_string(), LowRankVars { a, b, alpha });
        }
        (params, vars, order)
    }

    /// Folds `α B A` into each base weight. Fails if already merged.
    pub fn merge(&mut self) -> Result<ModelWeights> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let mut weights = self.base.weights.clone();
        let alpha = self.adapters.config.alpha as f32;
        let r = self.adapters.config.rank;
        for (name, ad) in self.adapters.iter() {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            let (k, d) = (w.shape()[0], w.shape()[1]);
            // W[k×d] += α Aᵀ Bᵀ
            f32::gemm(
                k,
                r,
                d,
                alpha,
                ad.a.data(),
                (1, k as isize),
                ad.b.data(),
                (1, r as isize),
                1.0,
                w.data_mut(),
                (d as isize, 1),
            );
        }
        self.merged = true;
        Ok(weights)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }
}

impl LanguageModel for AdaptedModel {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let (params, adapters, _) = self.bind(&mut tape, false);
        let out = forward_graph(&mut tape, &self.base.config, &params, &adapters, tokens)?;
        Ok(tape.take(out))
    }
}
