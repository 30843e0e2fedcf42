//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! return [`Var`] handles (indices into the tape), and [`Tape::backward`]
//! walks the recorded nodes in exact reverse order, accumulating gradients
//! into every leaf that was created with `requires_grad = true`.
//!
//! Broadcasting is limited to trailing-axis expansion: in `add`/`mul` the
//! right operand's shape must equal the left operand's shape or one of its
//! suffixes, and it is repeated over the leading axes.
//!
//! ```
//! use rlab::autodiff::Tape;
//! use rlab::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

use crate::tensor::{Scalar, Tensor, TensorError};

/// Probability floor applied to the student distribution inside [`Tape::kl_div`].
pub const KL_PROB_FLOOR: f64 = 1e-9;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    KlDiv {
        target: Var,
        pred: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn softmax_into<T: Scalar>(src: &[T], dst: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                dst[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                dst[base + j * inner] = dst[base + j * inner] / total;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients accumulate into it only if it requires grad.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Moves a tensor (and its accumulated gradient) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let placeholder = Tensor::scalar(T::zero());
        std::mem::replace(&mut self.nodes[v.0].value, placeholder)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("transpose", self.value(a))?;
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), needs))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let w = db.len();
        let out = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % w]))
            .collect();
        Ok((shape, out))
    }

    /// Elementwise sum; `b` broadcasts over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    /// Elementwise product; `b` broadcasts over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let out: Vec<T> = t.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<T> = t
            .data()
            .iter()
            .map(|&x| x / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Silu(a), needs)
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ w` along the last axis.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.shape(w) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let (xs, ws) = (self.data(x), self.data(w));
        let rows = xs.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * ws[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, needs))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                ndim: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); self.data(x).len()];
        softmax_into(self.data(x), &mut out, outer, shape[axis], inner);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, needs))
    }

    /// `KL(target ‖ pred)` summed over the last axis, averaged over leading rows.
    ///
    /// `pred` is floored at [`KL_PROB_FLOOR`] before the log, and `0·log(0/x)`
    /// counts as zero. The target side never receives a gradient.
    pub fn kl_div(&mut self, target: Var, pred: Var) -> Result<Var, TensorError> {
        let (st, sp) = (self.shape(target), self.shape(pred));
        if st != sp {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                lhs: st.to_vec(),
                rhs: sp.to_vec(),
            });
        }
        let v = *st.last().unwrap();
        let (pt, ps) = (self.data(target), self.data(pred));
        for row in pt.chunks(v).chain(ps.chunks(v)) {
            let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|x| *x < T::zero()) {
                return Err(TensorError::NotNormalized { sum });
            }
        }
        let floor = T::from_f64_lossy(KL_PROB_FLOOR);
        let rows = pt.len() / v;
        let mut total = T::zero();
        for (&t, &s) in pt.iter().zip(ps) {
            if t > T::zero() {
                total += t * (t / s.max(floor)).ln();
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::KlDiv { target, pred }, needs))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, v) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                vocab: v,
            });
        }
        let mut probs = vec![T::zero(); n * v];
        softmax_into(self.data(logits), &mut probs, n, v, 1);
        let data = self.data(logits);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let loss = total / T::from_usize(n).unwrap();
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Gathers rows of a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = matrix_dims("embedding", self.value(table))?;
        if let Some(&t) = ids.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::TargetOutOfRange { target: t, vocab });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rotary position embedding on a `[seq × (heads·head_dim)]` matrix.
    ///
    /// Row `t` is position `t`. Within each head, adjacent pairs `(2i, 2i+1)`
    /// are rotated by `t · theta^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, head_dim: usize, theta: f64) -> Result<Var, TensorError> {
        let (seq, width) = matrix_dims("rope", self.value(x))?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !width.is_multiple_of(head_dim) {
            return Err(TensorError::Invalid(format!(
                "rope: head_dim {head_dim} must be even and divide width {width}"
            )));
        }
        let (cos, sin) = rope_tables::<T>(seq, head_dim, theta);
        let mut out = self.data(x).to_vec();
        rotate(&mut out, width, head_dim, &cos, &sin, false);
        let needs = self.needs(x);
        let op = Op::Rope {
            x,
            head_dim,
            cos,
            sin,
        };
        Ok(self.push(Tensor::new(&[seq, width], out)?, op, needs))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(x))?;
        if width == 0 || start + width > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols: {start}..{} outside {cols} columns",
                start + width
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[rows, width], out)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let rows = matrix_dims("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("causal_mask", self.value(x))?;
        if r != c {
            return Err(TensorError::Invalid(format!(
                "causal_mask needs a square matrix, got {r}x{c}"
            )));
        }
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = T::neg_infinity();
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::CausalMask(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    ///
    /// Calling this twice without [`Tape::zero_grad`] doubles every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id, g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contrib)
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {
                self.nodes[id].value.accumulate_grad(&g);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        (n as isize, 1),
                        self.data(b),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.data(a),
                        (1, k as isize),
                        &g,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    acc(grads, b, db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                acc(grads, a, da);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(b) {
                    let w = self.value(b).numel();
                    let mut db = vec![T::zero(); w];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % w] += gv;
                    }
                    acc(grads, b, db);
                }
                if self.needs(a) {
                    acc(grads, a, g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (da_src, db_src) = (self.data(a), self.data(b));
                let w = db_src.len();
                if self.needs(b) {
                    let mut db = vec![T::zero(); w];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % w] += gv * da_src[i];
                    }
                    acc(grads, b, db);
                }
                if self.needs(a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * db_src[i % w])
                        .collect();
                    acc(grads, a, da);
                }
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                acc(grads, a, g.iter().map(|&v| v * s).collect());
            }
            Op::Silu(a) => {
                let a = *a;
                let da = self
                    .data(a)
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gv)| {
                        let sig = T::one() / (T::one() + (-x).exp());
                        gv * sig * (T::one() + x * (T::one() - sig))
                    })
                    .collect();
                acc(grads, a, da);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let (xs, ws) = (self.data(x), self.data(w));
                let d = ws.len();
                let dn = T::from_usize(d).unwrap();
                if self.needs(w) {
                    let mut dw = vec![T::zero(); d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dw[j] += g[r * d + j] * xs[r * d + j] * inv;
                        }
                    }
                    acc(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * d..(r + 1) * d];
                        let gw: Vec<T> = (0..d).map(|j| g[r * d + j] * ws[j]).collect();
                        let dot: T = gw.iter().zip(row).map(|(&a, &b)| a * b).sum();
                        let coef = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = gw[j] * inv - row[j] * coef;
                        }
                    }
                    acc(grads, x, dx);
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = node.value.shape();
                let y = node.value.data();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(grads, x, dx);
            }
            Op::KlDiv { target, pred } => {
                let (target, pred) = (*target, *pred);
                let (pt, ps) = (self.data(target), self.data(pred));
                let v = self.value(pred).last_dim();
                let scale = g[0] / T::from_usize(ps.len() / v).unwrap();
                let floor = T::from_f64_lossy(KL_PROB_FLOOR);
                let dp = pt
                    .iter()
                    .zip(ps)
                    .map(|(&t, &s)| {
                        if t > T::zero() && s > floor {
                            -t / s * scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, pred, dp);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let v = self.value(logits).last_dim();
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= scale;
                }
                acc(grads, logits, dl);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = self.value(table).last_dim();
                let mut dt = vec![T::zero(); self.value(table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(grads, table, dt);
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let x = *x;
                let width = node.value.last_dim();
                let mut dx = g;
                rotate(&mut dx, width, *head_dim, cos, sin, true);
                acc(grads, x, dx);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.shape(x)[1];
                let width = node.value.last_dim();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (r, chunk) in g.chunks(width).enumerate() {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(chunk);
                }
                acc(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = node.value.last_dim();
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::CausalMask(x) => {
                let x = *x;
                let n = node.value.last_dim();
                let mut dx = g;
                for i in 0..n {
                    for v in &mut dx[i * n + i + 1..(i + 1) * n] {
                        *v = T::zero();
                    }
                }
                acc(grads, x, dx);
            }
            Op::Sum(x) => {
                let x = *x;
                acc(grads, x, vec![g[0]; self.value(x).numel()]);
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.value(x).numel();
                acc(grads, x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
        }
    }
}

/// Cosine and sine tables of shape `[seq × head_dim/2]`.
pub(crate) fn rope_tables<T: Scalar>(seq: usize, head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    rope_tables_from(0, seq, head_dim, theta)
}

pub(crate) fn rope_tables_from<T: Scalar>(
    first_pos: usize,
    seq: usize,
    head_dim: usize,
    theta: f64,
) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for t in first_pos..first_pos + seq {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = t as f64 * freq;
            cos.push(T::from_f64_lossy(angle.cos()));
            sin.push(T::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

/// In-place pairwise rotation; `inverse` rotates by the negated angle.
pub(crate) fn rotate<T: Scalar>(
    data: &mut [T],
    width: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    for (t, row) in data.chunks_mut(width).enumerate() {
        let (c_row, s_row) = (
            &cos[t * half..(t + 1) * half],
            &sin[t * half..(t + 1) * half],
        );
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let (c, s) = (c_row[i], if inverse { -s_row[i] } else { s_row[i] });
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
