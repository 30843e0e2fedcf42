//! Decoder-only transformer with RoPE, RMS-norm, SiLU-gated MLP and
//! grouped-query attention.
//!
//! Weights are stored input-major (`[in × out]`), so a projection is
//! `x · W` on row-major activations. The output head is tied to the token
//! embedding.

mod decode;
mod train;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::VOCAB_SIZE;

pub use decode::IncrementalDecoder;
pub use train::{next_token_loss_graph, train_teacher, TeacherTrainConfig};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    MultiHead,
    GroupedQuery,
}

impl ModelConfig {
    /// 4 layers, d_model 128, 4 query heads sharing 2 kv heads.
    pub fn desk() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 256,
            max_seq_len: 128,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// The desk model with one kv head per query head.
    pub fn desk_mha() -> Self {
        Self {
            n_kv_heads: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.d_ff,
            self.max_seq_len,
        ]
        .contains(&0)
        {
            return fail("all sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head_dim {} must be even for rope",
                self.head_dim()
            ));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return fail("rope_theta and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn attention_kind(&self) -> AttentionKind {
        if self.n_kv_heads == self.n_heads {
            AttentionKind::MultiHead
        } else {
            AttentionKind::GroupedQuery
        }
    }

    /// Canonical tensor directory: names and shapes in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, kv, ff) = (self.d_model, self.kv_dim(), self.d_ff);
        let mut out = vec![(names::EMBED.to_string(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            let mut push = |part: &str, shape: Vec<usize>| out.push((names::layer(i, part), shape));
            push("attn.norm", vec![d]);
            push("attn.q_proj", vec![d, d]);
            push("attn.k_proj", vec![d, kv]);
            push("attn.v_proj", vec![d, kv]);
            push("attn.o_proj", vec![d, d]);
            push("mlp.norm", vec![d]);
            push("mlp.gate_proj", vec![d, ff]);
            push("mlp.up_proj", vec![d, ff]);
            push("mlp.down_proj", vec![ff, d]);
        }
        out.push((names::FINAL_NORM.to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Canonical tensor names, `layers.{i}.{attn|mlp}.{role}`.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const FINAL_NORM: &str = "final_norm";

    pub fn layer(i: usize, part: &str) -> String {
        format!("layers.{i}.{part}")
    }
}

/// Named weight tensors in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Small-scale Gaussian initialisation; norms start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 0.02f32;
        let residual = base / ((2 * config.n_layers) as f32).sqrt();
        let mut tensors = IndexMap::new();
        for (name, shape) in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("norm") {
                vec![1.0; n]
            } else {
                let std = if name.ends_with("o_proj") || name.ends_with("down_proj") {
                    residual
                } else {
                    base
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks the directory holds exactly the tensors `config` describes.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.tensor_shapes();
        if expected.len() != self.len() {
            return Err(Error::ConfigMismatch(format!(
                "config describes {} tensors, weights hold {}",
                expected.len(),
                self.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor<f32>)> for ModelWeights {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f32>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel: Sync {
    fn config(&self) -> &ModelConfig;

    /// `[len × vocab]` logits; row `t` predicts token `t + 1`.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f32>>;
}

/// A configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Transformer {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Forward pass without adapters.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let params = GraphParams::bind(&mut tape, &self.weights, |_| false);
        let logits = forward_graph(&mut tape, &self.config, &params, &HashMap::new(), tokens)?;
        Ok(tape.take(logits))
    }

    /// Runs sequences independently; output `i` belongs to input `i`.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Tensor<f32>>> {
        batch.iter().map(|s| self.forward(s)).collect()
    }

    /// Mean cross-entropy of predicting `tokens[1..]` from `tokens[..n-1]`.
    pub fn next_token_loss(&self, tokens: &[u32]) -> Result<f32> {
        let mut tape = Tape::new();
        let params = GraphParams::bind(&mut tape, &self.weights, |_| false);
        let loss =
            next_token_loss_graph(&mut tape, &self.config, &params, &HashMap::new(), tokens)?;
        Ok(tape.value(loss).data()[0])
    }
}

impl LanguageModel for Transformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        self.forward(tokens)
    }
}

/// Model weights recorded as leaves on a tape.
#[derive(Debug, Clone)]
pub struct GraphParams {
    vars: IndexMap<String, Var>,
}

impl GraphParams {
    /// Records every tensor; those selected by `trainable` require grad.
    pub fn bind(
        tape: &mut Tape<f32>,
        weights: &ModelWeights,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| {
                let leaf = t.clone().with_requires_grad(trainable(name));
                (name.to_string(), tape.leaf(leaf))
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Trainable low-rank factors attached to one projection: `A [r×in]`, `B [out×r]`.
#[derive(Debug, Clone, Copy)]
pub struct LowRankVars {
    pub a: Var,
    pub b: Var,
    pub alpha: f32,
}

/// Adapters keyed by the projection tensor name they modify.
pub type AdapterVars = HashMap<String, LowRankVars>;

pub fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn project(
    tape: &mut Tape<f32>,
    params: &GraphParams,
    adapters: &AdapterVars,
    name: &str,
    x: Var,
) -> Result<Var> {
    let y = tape.matmul(x, params.var(name)?)?;
    match adapters.get(name) {
        Some(lr) => crate::lora::add_low_rank(tape, x, y, lr),
        None => Ok(y),
    }
}

/// Expands `[seq × n_kv·hd]` to `[seq × n_heads·hd]` by repeating each kv
/// head `group` times. Identity when `group == 1`.
pub(crate) fn repeat_kv(
    tape: &mut Tape<f32>,
    x: Var,
    n_kv_heads: usize,
    group: usize,
    head_dim: usize,
) -> Result<Var> {
    if group == 1 {
        return Ok(x);
    }
    let mut parts = Vec::with_capacity(n_kv_heads * group);
    for h in 0..n_kv_heads {
        let head = tape.slice_cols(x, h * head_dim, head_dim)?;
        parts.extend(std::iter::repeat_n(head, group));
    }
    Ok(tape.concat_cols(&parts)?)
}

/// Causal scaled-dot-product attention with one kv head per query head.
pub(crate) fn multi_head_attention(
    tape: &mut Tape<f32>,
    n_heads: usize,
    head_dim: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let masked = tape.causal_mask(scores)?;
        let probs = tape.softmax(masked, 1)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    Ok(tape.concat_cols(&heads)?)
}

/// Records the full forward pass and returns the `[len × vocab]` logits.
pub fn forward_graph(
    tape: &mut Tape<f32>,
    config: &ModelConfig,
    params: &GraphParams,
    adapters: &AdapterVars,
    tokens: &[u32],
) -> Result<Var> {
    check_tokens(config, tokens)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let hd = config.head_dim();
    let eps = config.norm_eps as f32;
    let embed = params.var(names::EMBED)?;
    let mut x = tape.embedding(embed, &ids)?;
    for i in 0..config.n_layers {
        let name = |part: &str| names::layer(i, part);
        let h = tape.rms_norm(x, params.var(&name("attn.norm"))?, eps)?;
        let q = project(tape, params, adapters, &name("attn.q_proj"), h)?;
        let k = project(tape, params, adapters, &name("attn.k_proj"), h)?;
        let v = project(tape, params, adapters, &name("attn.v_proj"), h)?;
        let q = tape.rope(q, hd, config.rope_theta)?;
        let k = tape.rope(k, hd, config.rope_theta)?;
        let k = repeat_kv(tape, k, config.n_kv_heads, config.group_size(), hd)?;
        let v = repeat_kv(tape, v, config.n_kv_heads, config.group_size(), hd)?;
        let attn = multi_head_attention(tape, config.n_heads, hd, q, k, v)?;
        let o = project(tape, params, adapters, &name("attn.o_proj"), attn)?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, params.var(&name("mlp.norm"))?, eps)?;
        let gate = project(tape, params, adapters, &name("mlp.gate_proj"), h)?;
        let up = project(tape, params, adapters, &name("mlp.up_proj"), h)?;
        let gate = tape.silu(gate);
        let act = tape.mul(gate, up)?;
        let down = project(tape, params, adapters, &name("mlp.down_proj"), act)?;
        x = tape.add(x, down)?;
    }
    let x = tape.rms_norm(x, params.var(names::FINAL_NORM)?, eps)?;
    let head = tape.transpose(embed)?;
    Ok(tape.matmul(x, head)?)
}
