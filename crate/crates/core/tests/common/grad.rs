//! Central finite-difference checks for every differentiable tape operation,
//! in double precision. Each check panics on the first mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlab::autodiff::{Tape, Var};
use rlab::tensor::Tensor;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces a non-scalar output to a scalar through fixed random weights, so
/// every output element contributes a distinct coefficient.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Compares analytic and numeric gradients of `f` for every input.
fn check<F>(op: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let eval =
        |tape: &mut Tape<f64>, xs: &[Tensor<f64>], weights: &Option<Tensor<f64>>, grad: bool| {
            let vars: Vec<Var> = xs
                .iter()
                .map(|x| tape.leaf(x.clone().with_requires_grad(grad)))
                .collect();
            let out = f(tape, &vars);
            let loss = match weights {
                Some(w) => project(tape, out, w),
                None => out,
            };
            (vars, loss)
        };

    let mut probe = Tape::new();
    let consts: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
    let out = f(&mut probe, &consts);
    let out_shape = probe.value(out).shape().to_vec();
    let weights = (!out_shape.is_empty()).then(|| random(&mut rng, &out_shape));

    let mut tape = Tape::new();
    let (vars, loss) = eval(&mut tape, &inputs, &weights, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let shifted = |delta: f64| {
                let mut xs = inputs.clone();
                xs[i].data_mut()[j] += delta;
                let mut t = Tape::new();
                let (_, l) = eval(&mut t, &xs, &weights, false);
                t.value(l).data()[0]
            };
            let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            let err = rel_err(analytic[i][j], numeric);
            assert!(
                err < TOL,
                "{op} seed {seed}: input {i} element {j}: analytic {} numeric {numeric} rel err {err:e}",
                analytic[i][j]
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    )
}

pub fn matmul() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = dims(&mut rng);
        let inputs = vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
        check("matmul", inputs, seed, |t, v| t.matmul(v[0], v[1]).unwrap());
    }
}

pub fn transpose() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        check(
            "transpose",
            vec![random(&mut rng, &[m, n])],
            seed,
            |t, v| t.transpose(v[0]).unwrap(),
        );
    }
}

pub fn add_and_mul_with_broadcast() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let rhs = if seed % 2 == 0 { vec![n] } else { vec![m, n] };
        let inputs = vec![random(&mut rng, &[m, n]), random(&mut rng, &rhs)];
        check("add", inputs.clone(), seed, |t, v| {
            t.add(v[0], v[1]).unwrap()
        });
        check("mul", inputs, seed, |t, v| t.mul(v[0], v[1]).unwrap());
    }
}

pub fn mul_of_a_var_with_itself() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        check("square", vec![random(&mut rng, &[m, n])], seed, |t, v| {
            t.mul(v[0], v[0]).unwrap()
        });
    }
}

pub fn scale_and_silu() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let s = rng.random_range(-2.0..2.0);
        let x = random(&mut rng, &[m, n]);
        check("scale", vec![x.clone()], seed, |t, v| t.scale(v[0], s));
        check("silu", vec![x], seed, |t, v| t.silu(v[0]));
    }
}

pub fn rms_norm() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let n = n + 1;
        let inputs = vec![random(&mut rng, &[m, n]), random(&mut rng, &[n])];
        check("rms_norm", inputs, seed, |t, v| {
            t.rms_norm(v[0], v[1], 1e-5).unwrap()
        });
    }
}

pub fn softmax_on_each_axis() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, k) = dims(&mut rng);
        let x = random(&mut rng, &[m, n + 1, k]);
        let axis = (seed % 3) as usize;
        check("softmax", vec![x], seed, move |t, v| {
            t.softmax(v[0], axis).unwrap()
        });
    }
}

pub fn kl_divergence_through_softmax() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let n = n + 1;
        let teacher = random(&mut rng, &[m, n]);
        let student = random(&mut rng, &[m, n]);
        check("kl_div", vec![student], seed, move |t, v| {
            let tl = t.constant(teacher.clone());
            let tp = t.softmax(tl, 1).unwrap();
            let sp = t.softmax(v[0], 1).unwrap();
            t.kl_div(tp, sp).unwrap()
        });
    }
}

pub fn cross_entropy() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let n = n + 1;
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        check(
            "cross_entropy",
            vec![random(&mut rng, &[m, n])],
            seed,
            move |t, v| t.cross_entropy(v[0], &targets).unwrap(),
        );
    }
}

pub fn embedding_with_repeated_ids() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (vocab, d, len) = dims(&mut rng);
        let ids: Vec<usize> = (0..len + 2).map(|_| rng.random_range(0..vocab)).collect();
        check(
            "embedding",
            vec![random(&mut rng, &[vocab, d])],
            seed,
            move |t, v| t.embedding(v[0], &ids).unwrap(),
        );
    }
}

pub fn rope() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = rng.random_range(1..6);
        let head_dim = 2 * rng.random_range(1..4);
        let heads = rng.random_range(1..3);
        let x = random(&mut rng, &[seq, heads * head_dim]);
        check("rope", vec![x], seed, move |t, v| {
            t.rope(v[0], head_dim, 10_000.0).unwrap()
        });
    }
}

pub fn slice_and_concat_columns() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, a, b) = dims(&mut rng);
        let x = random(&mut rng, &[m, a + b]);
        check("slice_cols", vec![x], seed, move |t, v| {
            t.slice_cols(v[0], a, b).unwrap()
        });
        let parts = vec![random(&mut rng, &[m, a]), random(&mut rng, &[m, b])];
        check("concat_cols", parts, seed, |t, v| {
            t.concat_cols(&[v[1], v[0], v[1]]).unwrap()
        });
    }
}

pub fn causal_mask_then_softmax() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        check(
            "causal_mask",
            vec![random(&mut rng, &[n, n])],
            seed,
            |t, v| {
                let m = t.causal_mask(v[0]).unwrap();
                t.softmax(m, 1).unwrap()
            },
        );
    }
}

pub fn sum_and_mean() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let x = random(&mut rng, &[m, n]);
        check("sum", vec![x.clone()], seed, |t, v| t.sum(v[0]));
        check("mean", vec![x], seed, |t, v| t.mean(v[0]));
    }
}

pub fn composed_attention_block() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = rng.random_range(1..5);
        let inputs = vec![
            random(&mut rng, &[seq, 4]),
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4, 4]),
        ];
        check("attention", inputs, seed, move |t, v| {
            let q = t.matmul(v[0], v[1]).unwrap();
            let q = t.rope(q, 4, 10_000.0).unwrap();
            let k = t.matmul(v[0], v[2]).unwrap();
            let k = t.rope(k, 4, 10_000.0).unwrap();
            let val = t.matmul(v[0], v[3]).unwrap();
            let kt = t.transpose(k).unwrap();
            let s = t.matmul(q, kt).unwrap();
            let s = t.scale(s, 0.5);
            let s = t.causal_mask(s).unwrap();
            let p = t.softmax(s, 1).unwrap();
            t.matmul(p, val).unwrap()
        });
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("transpose", transpose),
    ("add_and_mul_with_broadcast", add_and_mul_with_broadcast),
    ("mul_of_a_var_with_itself", mul_of_a_var_with_itself),
    ("scale_and_silu", scale_and_silu),
    ("rms_norm", rms_norm),
    ("softmax_on_each_axis", softmax_on_each_axis),
    (
        "kl_divergence_through_softmax",
        kl_divergence_through_softmax,
    ),
    ("cross_entropy", cross_entropy),
    ("embedding_with_repeated_ids", embedding_with_repeated_ids),
    ("rope", rope),
    ("slice_and_concat_columns", slice_and_concat_columns),
    ("causal_mask_then_softmax", causal_mask_then_softmax),
    ("sum_and_mean", sum_and_mean),
    ("composed_attention_block", composed_attention_block),
];
