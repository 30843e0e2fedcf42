//! A one-layer, two-dimensional model checked against a plain scalar
//! evaluation written out step by step.

use rlab::tensor::Tensor;
use rlab::transformer::{ModelConfig, ModelWeights, Transformer};

const VOCAB: usize = 4;
const D: usize = 2;
const FF: usize = 3;
const EPS: f64 = 1e-5;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        d_model: D,
        n_layers: 1,
        n_heads: 1,
        n_kv_heads: 1,
        d_ff: FF,
        max_seq_len: 4,
        rope_theta: 10_000.0,
        norm_eps: EPS,
    }
}

/// Row-major `[rows × cols]` values, input-major for projections.
fn table() -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    vec![
        (
            "embed",
            vec![VOCAB, D],
            vec![0.5, -1.0, 1.5, 0.25, -0.75, 0.8, 0.1, -0.3],
        ),
        ("layers.0.attn.norm", vec![D], vec![1.2, 0.9]),
        (
            "layers.0.attn.q_proj",
            vec![D, D],
            vec![0.6, -0.4, 0.3, 0.9],
        ),
        (
            "layers.0.attn.k_proj",
            vec![D, D],
            vec![-0.5, 0.7, 0.8, 0.2],
        ),
        (
            "layers.0.attn.v_proj",
            vec![D, D],
            vec![1.1, 0.3, -0.2, 0.6],
        ),
        (
            "layers.0.attn.o_proj",
            vec![D, D],
            vec![0.4, -0.9, 0.5, 0.35],
        ),
        ("layers.0.mlp.norm", vec![D], vec![0.8, 1.1]),
        (
            "layers.0.mlp.gate_proj",
            vec![D, FF],
            vec![0.3, -0.6, 0.9, 0.7, 0.2, -0.4],
        ),
        (
            "layers.0.mlp.up_proj",
            vec![D, FF],
            vec![-0.8, 0.5, 0.1, 0.4, 0.6, -0.3],
        ),
        (
            "layers.0.mlp.down_proj",
            vec![FF, D],
            vec![0.2, -0.5, 0.7, 0.1, -0.6, 0.45],
        ),
        ("final_norm", vec![D], vec![1.05, 0.95]),
    ]
}

fn get(name: &str) -> Vec<f64> {
    table().into_iter().find(|(n, _, _)| *n == name).unwrap().2
}

fn rms_norm(x: &[f64], w: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + EPS).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

/// `x [in] · W [in × out]`.
fn project(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum())
        .collect()
}

/// Rotation of the single pair by `pos` radians (frequency 1 for the first pair).
fn rope(x: &[f64], pos: usize) -> Vec<f64> {
    let a = pos as f64;
    vec![
        x[0] * a.cos() - x[1] * a.sin(),
        x[0] * a.sin() + x[1] * a.cos(),
    ]
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn oracle(tokens: &[usize]) -> Vec<Vec<f64>> {
    let embed = get("embed");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| embed[t * D..(t + 1) * D].to_vec())
        .collect();

    let hs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| rms_norm(x, &get("layers.0.attn.norm")))
        .collect();
    let qs: Vec<Vec<f64>> = hs
        .iter()
        .enumerate()
        .map(|(t, h)| rope(&project(h, &get("layers.0.attn.q_proj"), D), t))
        .collect();
    let ks: Vec<Vec<f64>> = hs
        .iter()
        .enumerate()
        .map(|(t, h)| rope(&project(h, &get("layers.0.attn.k_proj"), D), t))
        .collect();
    let vs: Vec<Vec<f64>> = hs
        .iter()
        .map(|h| project(h, &get("layers.0.attn.v_proj"), D))
        .collect();
    let scale = 1.0 / (D as f64).sqrt();
    for t in 0..tokens.len() {
        let scores: Vec<f64> = (0..=t)
            .map(|s| scale * (qs[t][0] * ks[s][0] + qs[t][1] * ks[s][1]))
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut att = [0.0; D];
        for (s, w) in e.iter().enumerate() {
            for j in 0..D {
                att[j] += w / z * vs[s][j];
            }
        }
        let o = project(&att, &get("layers.0.attn.o_proj"), D);
        for j in 0..D {
            xs[t][j] += o[j];
        }
    }

    for x in xs.iter_mut() {
        let h = rms_norm(x, &get("layers.0.mlp.norm"));
        let g = project(&h, &get("layers.0.mlp.gate_proj"), FF);
        let u = project(&h, &get("layers.0.mlp.up_proj"), FF);
        let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
        let down = project(&act, &get("layers.0.mlp.down_proj"), D);
        for j in 0..D {
            x[j] += down[j];
        }
    }

    xs.iter()
        .map(|x| {
            let h = rms_norm(x, &get("final_norm"));
            (0..VOCAB)
                .map(|v| h[0] * embed[v * D] + h[1] * embed[v * D + 1])
                .collect()
        })
        .collect()
}

#[test]
fn two_token_forward_matches_scalar_oracle() {
    let mut weights = ModelWeights::new();
    for (name, shape, data) in table() {
        weights.insert(
            name,
            Tensor::new(&shape, data.iter().map(|&v| v as f32).collect()).unwrap(),
        );
    }
    let model = Transformer::new(config(), weights).unwrap();
    for tokens in [[1usize, 3], [2, 0], [3, 3]] {
        let got = model.forward(&tokens.map(|t| t as u32)).unwrap();
        assert_eq!(got.shape(), &[2, VOCAB]);
        let want = oracle(&tokens);
        for t in 0..2 {
            for v in 0..VOCAB {
                let g = got.at(t, v) as f64;
                assert!(
                    (g - want[t][v]).abs() < 1e-5,
                    "{tokens:?} pos {t} token {v}: {g} vs {}",
                    want[t][v]
                );
            }
        }
    }
}
