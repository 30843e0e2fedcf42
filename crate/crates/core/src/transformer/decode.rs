//! Tape-free incremental decoding with a per-row KV cache.

use super::{names, ModelConfig, Transformer};
use crate::autodiff::{rope_tables_from, rotate};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct LayerCache {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Steps several sequences forward one token at a time, all at the same position.
pub struct IncrementalDecoder<'m> {
    model: &'m Transformer,
    caches: Vec<Vec<LayerCache>>,
    pos: usize,
}

fn rms_norm_rows(x: &[f32], w: &[f32], eps: f32) -> Vec<f32> {
    let d = w.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            o[j] = row[j] * inv * w[j];
        }
    }
    out
}

fn matmul(x: &[f32], rows: usize, w: &[f32], k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * n];
    f32::gemm(
        rows,
        k,
        n,
        1.0,
        x,
        (k as isize, 1),
        w,
        (n as isize, 1),
        0.0,
        &mut out,
        (n as isize, 1),
    );
    out
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Transformer, rows: usize) -> Self {
        let caches = (0..rows)
            .map(|_| {
                (0..model.config.n_layers)
                    .map(|_| LayerCache {
                        k: Vec::new(),
                        v: Vec::new(),
                    })
                    .collect()
            })
            .collect();
        Self {
            model,
            caches,
            pos: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.caches.len()
    }

    /// Number of tokens consumed so far by every row.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Drops rows whose flag is false, preserving the order of the rest.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.caches.retain(|_| *it.next().unwrap_or(&false));
    }

    /// Feeds one token per row and returns each row's next-token logits.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        let cfg: &ModelConfig = &self.model.config;
        let w = &self.model.weights;
        if tokens.len() != self.rows() {
            return Err(Error::Invalid(format!(
                "{} tokens for {} decoder rows",
                tokens.len(),
                self.rows()
            )));
        }
        if self.pos >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        let rows = tokens.len();
        let (d, kv, ff, hd) = (cfg.d_model, cfg.kv_dim(), cfg.d_ff, cfg.head_dim());
        let eps = cfg.norm_eps as f32;
        let embed = w.require(names::EMBED)?.data();
        let mut x: Vec<f32> = tokens
            .iter()
            .flat_map(|&t| embed[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let (cos, sin) = rope_tables_from::<f32>(self.pos, 1, hd, cfg.rope_theta);
        let scale = 1.0 / (hd as f32).sqrt();
        let len = self.pos + 1;
        for i in 0..cfg.n_layers {
            let p = |s: &str| w.require(&names::layer(i, s)).map(|t| t.data());
            let h = rms_norm_rows(&x, p("attn.norm")?, eps);
            let mut q = matmul(&h, rows, p("attn.q_proj")?, d, d);
            let mut k = matmul(&h, rows, p("attn.k_proj")?, d, kv);
            let v = matmul(&h, rows, p("attn.v_proj")?, d, kv);
            for r in 0..rows {
                rotate(&mut q[r * d..(r + 1) * d], d, hd, &cos, &sin, false);
                rotate(&mut k[r * kv..(r + 1) * kv], kv, hd, &cos, &sin, false);
            }
            let mut attn = vec![0.0f32; rows * d];
            let mut scores = vec![0.0f32; len];
            for r in 0..rows {
                let cache = &mut self.caches[r][i];
                cache.k.extend_from_slice(&k[r * kv..(r + 1) * kv]);
                cache.v.extend_from_slice(&v[r * kv..(r + 1) * kv]);
                for head in 0..cfg.n_heads {
                    let kvh = head / cfg.group_size();
                    let qh = &q[r * d + head * hd..r * d + (head + 1) * hd];
                    let mut max = f32::NEG_INFINITY;
                    for (t, s) in scores.iter_mut().enumerate() {
                        let kh = &cache.k[t * kv + kvh * hd..t * kv + (kvh + 1) * hd];
                        *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let out = &mut attn[r * d + head * hd..r * d + (head + 1) * hd];
                    for (t, s) in scores.iter().enumerate() {
                        let vh = &cache.v[t * kv + kvh * hd..t * kv + (kvh + 1) * hd];
                        let wgt = s / total;
                        out.iter_mut().zip(vh).for_each(|(o, &vv)| *o += wgt * vv);
                    }
                }
            }
            let o = matmul(&attn, rows, p("attn.o_proj")?, d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = rms_norm_rows(&x, p("mlp.norm")?, eps);
            let gate = matmul(&h, rows, p("mlp.gate_proj")?, d, ff);
            let up = matmul(&h, rows, p("mlp.up_proj")?, d, ff);
            let act: Vec<f32> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = matmul(&act, rows, p("mlp.down_proj")?, ff, d);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        let h = rms_norm_rows(&x, w.require(names::FINAL_NORM)?.data(), eps);
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0f32; rows * vocab];
        f32::gemm(
            rows,
            d,
            vocab,
            1.0,
            &h,
            (d as isize, 1),
            embed,
            (1, d as isize),
            0.0,
            &mut logits,
            (vocab as isize, 1),
        );
        self.pos += 1;
        Ok(logits.chunks(vocab).map(<[f32]>::to_vec).collect())
    }
}
