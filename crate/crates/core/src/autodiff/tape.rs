//! Dynamic tape: every forward op appends a node, `backward` replays the
//! nodes in reverse and accumulates vector-Jacobian products.

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Result, TdenError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Logit assigned to disallowed attention entries.
pub const MASKED_LOGIT: f64 = -1e9;

/// Boolean attention mask; `allowed(i, j)` means query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask over a sequence of length `len`.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        AttnMask {
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        AttnMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn is_causal(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..self.cols).all(|j| self.allowed(i, j) == (j <= i)))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        floored: Vec<bool>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    /// Scalar-valued losses whose local gradient w.r.t. their single input is
    /// precomputed during the forward pass.
    LossWithLocalGrad {
        input: Var,
        local: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`] for every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Record a leaf. Gradients are collected for it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TdenError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TdenError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TdenError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds the vector `row` (length n) to every row of `a` (..×n).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(TdenError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &rv) in chunk.iter_mut().zip(r) {
                *o += rv;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::Scale(a, c),
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum of a non-empty list of same-shaped values, left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| TdenError::contract("add_all over an empty list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).expect("shape preserved"), op, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) || shape.get(axis).copied().unwrap_or(1) == 0 {
            return Err(TdenError::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let n = shape.get(axis).copied().unwrap_or(1);
        let outer: usize = shape[..axis.min(shape.len())].iter().product();
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for inn in 0..inner {
                for i in 0..n {
                    buf[i] = src[o * n * inner + i * inner + inn];
                }
                kernels::softmax_in_place(&mut buf);
                for i in 0..n {
                    out[o * n * inner + i * inner + inn] = buf[i];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, n, inner },
            ng,
        ))
    }

    /// Layer normalization over the last axis. `eps` floors the variance so a
    /// constant row maps to zeros instead of dividing by zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(TdenError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.value(x).rows();
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut floored = vec![false; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let fl = var <= eps;
            let rs = 1.0 / if fl { eps } else { var }.sqrt();
            rstd[r] = rs;
            floored[r] = fl;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                floored,
            },
            ng,
        ))
    }

    /// Selects rows of a matrix (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "gather_rows")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TdenError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TdenError::contract("concat_rows over an empty list"))?;
        let cols = self.matrix_dims(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(TdenError::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), ng))
    }

    /// Column-wise mean, producing a 1×n row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "mean_rows")?;
        if r == 0 {
            return Err(TdenError::contract("mean_rows over zero rows"));
        }
        let src = self.data(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            axpy(1.0, &src[i * c..(i + 1) * c], &mut out);
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), ng))
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
    /// Heads are contiguous column blocks of width `d / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttnMask,
        heads: usize,
    ) -> Result<Var> {
        let (lq, d) = self.matrix_dims(q, "attention")?;
        let (lk, dk) = self.matrix_dims(k, "attention")?;
        let (lv, dv) = self.matrix_dims(v, "attention")?;
        if dk != d || dv != d || lv != lk {
            return Err(TdenError::Shape {
                op: "attention",
                lhs: vec![lq, d],
                rhs: vec![lk, dk],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TdenError::contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if mask.rows() != lq || mask.cols() != lk {
            return Err(TdenError::Shape {
                op: "attention mask",
                lhs: vec![lq, lk],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        for i in 0..lq {
            if !(0..lk).any(|j| mask.allowed(i, j)) {
                return Err(TdenError::contract(format!(
                    "attention query row {i} has no permitted key"
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..lq {
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let qi = &qd[i * d..(i + 1) * d][hs.clone()];
                for j in 0..lk {
                    p[j] = if mask.allowed(i, j) {
                        dot(qi, &kd[j * d..(j + 1) * d][hs.clone()]) * scale
                    } else {
                        MASKED_LOGIT
                    };
                }
                kernels::softmax_in_place(p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..lk {
                    if p[j] != 0.0 {
                        axpy(p[j], &vd[j * d..(j + 1) * d][hs.clone()], o);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![lq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Row-wise unit normalization.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "l2_normalize_rows")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt().max(1e-12);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::L2Normalize { x, norms },
            ng,
        ))
    }

    fn loss_node(&mut self, input: Var, value: f64, local: Vec<f64>) -> Var {
        let ng = self.ng(input);
        self.push(
            Tensor::scalar(value),
            Op::LossWithLocalGrad { input, local },
            ng,
        )
    }

    /// Weighted mean over rows of `−log softmax(logits)[target]`.
    /// Rows with zero weight are excluded from both numerator and denominator.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (b, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != b || weights.is_some_and(|w| w.len() != b) {
            return Err(TdenError::Shape {
                op: "cross_entropy",
                lhs: vec![b, v],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(TdenError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
        }
        let w: Vec<f64> = weights.map_or_else(|| vec![1.0; b], <[f64]>::to_vec);
        let denom: f64 = w.iter().sum();
        if denom <= 0.0 {
            return Err(TdenError::contract("cross_entropy with no weighted items"));
        }
        let src = self.data(logits);
        let mut local = vec![0.0; b * v];
        let mut total = 0.0;
        for i in 0..b {
            if w[i] == 0.0 {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += w[i] * (lse - row[targets[i]]);
            let g = &mut local[i * v..(i + 1) * v];
            for j in 0..v {
                g[j] = w[i] * (row[j] - lse).exp() / denom;
            }
            g[targets[i]] -= w[i] / denom;
        }
        Ok(self.loss_node(logits, total / denom, local))
    }

    /// Mean over rows of `KL(target ‖ softmax(pred_logits))`.
    pub fn kl_divergence(&mut self, pred_logits: Var, target: &Tensor) -> Result<Var> {
        let (b, c) = self.matrix_dims(pred_logits, "kl_divergence")?;
        if target.shape() != [b, c] {
            return Err(TdenError::Shape {
                op: "kl_divergence",
                lhs: vec![b, c],
                rhs: target.shape().to_vec(),
            });
        }
        if b == 0 {
            return Err(TdenError::contract("kl_divergence over zero rows"));
        }
        let t = target.data();
        for i in 0..b {
            let row = &t[i * c..(i + 1) * c];
            if let Some(neg) = row.iter().find(|&&x| x < 0.0) {
                return Err(TdenError::Domain(format!(
                    "negative target probability {neg} in row {i}"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(TdenError::Domain(format!(
                    "target row {i} sums to {s}, expected 1"
                )));
            }
        }
        let src = self.data(pred_logits);
        let mut local = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            for j in 0..c {
                let tj = t[i * c + j];
                let logp = row[j] - lse;
                if tj > 0.0 {
                    total += tj * (tj.ln() - logp);
                }
                local[i * c + j] = (logp.exp() - tj) / b as f64;
            }
        }
        Ok(self.loss_node(pred_logits, total / b as f64, local))
    }

    /// Bidirectional in-batch hinge ranking loss over a B×B similarity matrix
    /// whose diagonal holds the matched pairs. Averaged over all 2·B·(B−1) hinge terms.
    pub fn ranking_hinge(&mut self, sim: Var, margin: f64) -> Result<Var> {
        let (b, b2) = self.matrix_dims(sim, "ranking_hinge")?;
        if b != b2 {
            return Err(TdenError::Shape {
                op: "ranking_hinge",
                lhs: vec![b, b2],
                rhs: vec![],
            });
        }
        if b < 2 {
            return Err(TdenError::contract(format!(
                "ranking loss needs at least 2 pairs, got {b}"
            )));
        }
        let s = self.data(sim);
        let count = (2 * b * (b - 1)) as f64;
        let mut local = vec![0.0; b * b];
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let forward = margin - s[i * b + i] + s[i * b + j];
                if forward > 0.0 {
                    total += forward;
                    local[i * b + i] -= 1.0 / count;
                    local[i * b + j] += 1.0 / count;
                }
                let backward = margin - s[i * b + i] + s[j * b + i];
                if backward > 0.0 {
                    total += backward;
                    local[i * b + i] -= 1.0 / count;
                    local[j * b + i] += 1.0 / count;
                }
            }
        }
        Ok(self.loss_node(sim, total / count, local))
    }

    /// Mean sigmoid binary cross-entropy against soft targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(TdenError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let z = self.data(logits);
        let n = z.len() as f64;
        let mut total = 0.0;
        let mut local = vec![0.0; z.len()];
        for (i, (&zi, &ti)) in z.iter().zip(targets.data()).enumerate() {
            let softplus = zi.max(0.0) + (-zi.abs()).exp().ln_1p();
            total += softplus - ti * zi;
            let sig = 1.0 / (1.0 + (-zi).exp());
            local[i] = (sig - ti) / n;
        }
        Ok(self.loss_node(logits, total / n, local))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TdenError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited += 1;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let target = &nodes[v.0];
                if !target.needs_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
                f(buf);
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].value.shape()[1];
                    acc(*a, &mut |buf| gemm_nt(&g, val(*b), buf, m, n, k));
                    acc(*b, &mut |buf| gemm_tn(val(*a), &g, buf, m, k, n));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| axpy(1.0, &g, buf));
                    acc(*b, &mut |buf| axpy(1.0, &g, buf));
                }
                Op::AddRow(a, row) => {
                    acc(*a, &mut |buf| axpy(1.0, &g, buf));
                    acc(*row, &mut |buf| {
                        let n = buf.len();
                        for chunk in g.chunks(n) {
                            axpy(1.0, chunk, buf);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    acc(*a, &mut |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(&g).zip(val(*b)) {
                            *o += gv * bv;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(&g).zip(val(*a)) {
                            *o += gv * av;
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |buf| axpy(*c, &g, buf)),
                Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(a) => acc(*a, &mut |buf| {
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|o| *o += s);
                }),
                Op::Gelu(a) => acc(*a, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(val(*a)) {
                        *o += gv * gelu_grad(x);
                    }
                }),
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |buf| {
                        for ((o, &gv), &yv) in buf.iter_mut().zip(&g).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    })
                }
                Op::Relu(a) => acc(*a, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(val(*a)) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }),
                Op::Softmax { x, outer, n, inner } => {
                    let y = node.value.data();
                    let (outer, n, inner) = (*outer, *n, *inner);
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            for inn in 0..inner {
                                let at = |i: usize| o * n * inner + i * inner + inn;
                                let s: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                                for i in 0..n {
                                    buf[at(i)] += y[at(i)] * (g[at(i)] - s);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                    floored,
                } => {
                    let gv = val(*gain);
                    let d = gv.len();
                    let rows = rstd.len();
                    acc(*gain, &mut |buf| {
                        for r in 0..rows {
                            for c in 0..d {
                                buf[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    });
                    acc(*bias, &mut |buf| {
                        for r in 0..rows {
                            axpy(1.0, &g[r * d..(r + 1) * d], buf);
                        }
                    });
                    acc(*x, &mut |buf| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let xh = &xhat[r * d..(r + 1) * d];
                            for c in 0..d {
                                dxhat[c] = g[r * d + c] * gv[c];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = if floored[r] {
                                0.0
                            } else {
                                dot(&dxhat, xh) / d as f64
                            };
                            for c in 0..d {
                                buf[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let cols = nodes[x.0].value.cols();
                    acc(*x, &mut |buf| {
                        for (r, &src) in idx.iter().enumerate() {
                            axpy(
                                1.0,
                                &g[r * cols..(r + 1) * cols],
                                &mut buf[src * cols..(src + 1) * cols],
                            );
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        let slice = &g[offset..offset + len];
                        acc(*p, &mut |buf| axpy(1.0, slice, buf));
                        offset += len;
                    }
                }
                Op::Reshape(x) => acc(*x, &mut |buf| axpy(1.0, &g, buf)),
                Op::Transpose(x) => {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(*x, &mut |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(*x, &mut |buf| {
                        for i in 0..r {
                            axpy(1.0 / r as f64, &g, &mut buf[i * c..(i + 1) * c]);
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                    let d = nodes[q.0].value.cols();
                    let lq = nodes[q.0].value.rows();
                    let lk = nodes[k.0].value.rows();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; lq * d];
                    let mut dk = vec![0.0; lk * d];
                    let mut dv = vec![0.0; lk * d];
                    let mut ds = vec![0.0; lk];
                    for h in 0..*heads {
                        let hs = h * dh..(h + 1) * dh;
                        for i in 0..lq {
                            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let go = &g[i * d..(i + 1) * d][hs.clone()];
                            let mut t = 0.0;
                            for j in 0..lk {
                                let dp = if p[j] != 0.0 {
                                    dot(go, &vd[j * d..(j + 1) * d][hs.clone()])
                                } else {
                                    0.0
                                };
                                ds[j] = dp;
                                t += dp * p[j];
                            }
                            for j in 0..lk {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let dsj = p[j] * (ds[j] - t) * scale;
                                axpy(p[j], go, &mut dv[j * d..(j + 1) * d][hs.clone()]);
                                axpy(
                                    dsj,
                                    &kd[j * d..(j + 1) * d][hs.clone()],
                                    &mut dq[i * d..(i + 1) * d][hs.clone()],
                                );
                                axpy(
                                    dsj,
                                    &qd[i * d..(i + 1) * d][hs.clone()],
                                    &mut dk[j * d..(j + 1) * d][hs.clone()],
                                );
                            }
                        }
                    }
                    acc(*q, &mut |buf| axpy(1.0, &dq, buf));
                    acc(*k, &mut |buf| axpy(1.0, &dk, buf));
                    acc(*v, &mut |buf| axpy(1.0, &dv, buf));
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(*x, &mut |buf| {
                        for (i, &n) in norms.iter().enumerate() {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let proj = dot(yr, gr);
                            for j in 0..c {
                                buf[i * c + j] += (gr[j] - yr[j] * proj) / n;
                            }
                        }
                    });
                }
                Op::LossWithLocalGrad { input, local } => {
                    acc(*input, &mut |buf| axpy(g[0], local, buf));
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            visited,
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
