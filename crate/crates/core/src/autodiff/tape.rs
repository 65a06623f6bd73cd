//! Reverse-mode tape. Every op appends a node holding its output value and
//! enough context to run its vector-Jacobian product; `backward` walks the
//! nodes once, newest first.

use super::tensor::{gemm_into, transpose2, Float, Tensor};
use crate::error::TensorError;

/// Target index that `cross_entropy` skips.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Smallest magnitude a divisor may take.
pub const DIV_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    Frobenius(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, count: usize },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    CausalAttention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    StraightThrough { soft: Var },
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of a computation. Single-threaded; create one per step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires gradients (inference).
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Summed bytes of all values recorded so far.
    pub fn allocated_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.bytes()).sum()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, rg, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]` (a linear layer with `[out×in]` weights).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if tb { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::dim(op, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::dim(op, sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(self.data(a), false, self.data(b), tb, m, k, n, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul { a, b, tb }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", format!("expected rank 2, got {s:?}")));
        }
        let out = transpose2(self.data(a), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], out), rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn row_shape(&self, op: &'static str, a: Var, v: Var) -> Result<(), TensorError> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sv.len() != 1 || sv[0] != *sa.last().unwrap() {
            return Err(TensorError::dim(op, sa, sv));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), out)
    }

    fn row_map(&self, a: Var, v: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let vec = self.data(v);
        let d = vec.len();
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vec[i % d]))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), out)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(value, rg, op)
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) == self.shape(b) {
            let value = self.zip_map(a, b, |x, y| x + y);
            let rg = self.rg(&[a, b]);
            return Ok(self.push(value, rg, Op::Add(a, b)));
        }
        self.row_shape("add", a, b)?;
        let value = self.row_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product. `b` may also be a vector matching the last axis of
    /// `a`, which is how a channel mask is applied to activations.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) == self.shape(b) {
            let value = self.zip_map(a, b, |x, y| x * y);
            let rg = self.rg(&[a, b]);
            return Ok(self.push(value, rg, Op::Mul(a, b)));
        }
        self.row_shape("mul", a, b)?;
        let value = self.row_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MulRow(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        let value = self.zip_map(a, b, |x, y| x / guard(y));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), rg, Op::Mean(a))
    }

    /// Frobenius (entrywise L2) norm.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s.sqrt()), rg, Op::Frobenius(a))
    }

    /// Forward value `hard`, gradient of `soft` (straight-through estimator).
    pub fn straight_through(&mut self, hard: T, soft: Var) -> Result<Var, TensorError> {
        if self.value(soft).numel() != 1 {
            return Err(TensorError::shape("straight_through", "soft operand must be scalar"));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(Tensor::scalar(hard), rg, Op::StraightThrough { soft }))
    }

    // ---- neural-network ops ------------------------------------------------

    /// `x_i / sqrt(mean(x²) + eps) · g_i` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap();
        if d == 0 || self.shape(gain) != [d] {
            return Err(TensorError::dim("rmsnorm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let dt = T::from_usize(d).unwrap();
        let rows = xs.len() / d;
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * g[j];
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::SoftmaxRows(a))
    }

    /// Mean next-token cross-entropy over rows of `logits: [n×vocab]`,
    /// skipping rows whose target is [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::dim("cross_entropy", &s, &[targets.len()]));
        }
        let (n, v) = (s[0], s[1]);
        let xs = self.data(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..n {
            let t = targets[r];
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= v {
                return Err(TensorError::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += (lse - row[t]).to_f64c();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::shape("cross_entropy", "no non-ignored targets"));
        }
        let loss = T::from_f64c(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Gathers rows of `table: [vocab×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("embedding", format!("table must be rank 2, got {s:?}")));
        }
        if ids.is_empty() {
            return Err(TensorError::shape("embedding", "empty id list"));
        }
        let (vocab, d) = (s[0], s[1]);
        let tab = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_last", "no operands"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::dim("concat_last", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are `[batch·seq × heads·head_dim]`
    /// with rows ordered batch-major; scores are scaled by `1/sqrt(head_dim)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(TensorError::dim("causal_attention", &s, self.shape(k)));
        }
        if s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
            return Err(TensorError::shape(
                "causal_attention",
                format!("shape {s:?} incompatible with batch={batch} seq={seq} heads={heads}"),
            ));
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            head_dim: s[1] / heads,
        };
        let (out, probs) = attention_forward(geom, self.data(q), self.data(k), self.data(v));
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                geom,
                probs,
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                if self.requires_grad(*a) {
                    // dA = G·B (tb) or G·Bᵀ
                    let ga = self.acc(grads, *a);
                    gemm_into(g, false, self.data(*b), !*tb, m, n, k, ga, true);
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    if *tb {
                        // B is [n×k]: dB = Gᵀ·A
                        gemm_into(g, true, self.data(*a), false, n, m, k, gb, true);
                    } else {
                        // B is [k×n]: dB = Aᵀ·G
                        gemm_into(self.data(*a), true, g, false, k, m, n, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| g[j]);
            }
            Op::AddRow(a, v) => {
                self.acc_map(grads, *a, |j| g[j]);
                if self.requires_grad(*v) {
                    let gv = self.acc(grads, *v);
                    let d = gv.len();
                    for (j, &gj) in g.iter().enumerate() {
                        gv[j % d] += gj;
                    }
                }
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, |j| g[j] * xb[j]);
                self.acc_map(grads, *b, |j| g[j] * xa[j]);
            }
            Op::MulRow(a, v) => {
                let (xa, xv) = (self.data(*a), self.data(*v));
                let d = xv.len();
                self.acc_map(grads, *a, |j| g[j] * xv[j % d]);
                if self.requires_grad(*v) {
                    let gv = self.acc(grads, *v);
                    for (j, &gj) in g.iter().enumerate() {
                        gv[j % d] += gj * xa[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, |j| g[j] / guard(xb[j]));
                self.acc_map(grads, *b, |j| {
                    let den = guard(xb[j]);
                    -g[j] * xa[j] / (den * den)
                });
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, |j| g[j] * *c),
            Op::AddScalar(a) => self.acc_map(grads, *a, |j| g[j]),
            Op::Sigmoid(a) => self.acc_map(grads, *a, |j| g[j] * out[j] * (T::one() - out[j])),
            Op::Silu(a) => {
                let xa = self.data(*a);
                self.acc_map(grads, *a, |j| {
                    let s = sigmoid(xa[j]);
                    g[j] * s * (T::one() + xa[j] * (T::one() - s))
                });
            }
            Op::Abs(a) => {
                let xa = self.data(*a);
                self.acc_map(grads, *a, |j| g[j] * sign(xa[j]));
            }
            Op::Frobenius(a) => {
                let xa = self.data(*a);
                let norm = out[0];
                if norm > T::zero() {
                    self.acc_map(grads, *a, |j| g[0] * xa[j] / norm);
                } else if self.requires_grad(*a) {
                    self.acc(grads, *a);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = self.data(*x);
                let gn = self.data(*gain);
                let d = gn.len();
                let dt = T::from_usize(d).unwrap();
                if self.requires_grad(*x) {
                    let gx = self.acc(grads, *x);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let base = r * d;
                        // y_j = x_j·inv·g_j ; dinv/dx_k = -x_k·inv³/d
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += g[base + j] * gn[j] * xs[base + j];
                        }
                        let c = dot * inv * inv * inv / dt;
                        for j in 0..d {
                            gx[base + j] += g[base + j] * gn[j] * inv - xs[base + j] * c;
                        }
                    }
                }
                if self.requires_grad(*gain) {
                    let gg = self.acc(grads, *gain);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xs[r * d + j] * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let d = *node.value.shape().last().unwrap();
                    let ga = self.acc(grads, *a);
                    for r in 0..out.len() / d {
                        let (p, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.requires_grad(*logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let gl = self.acc(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += probs[r * v + j] * scale;
                        }
                        gl[r * v + t] -= scale;
                    }
                }
            }
            Op::Sum(a) => self.acc_map(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                self.acc_map(grads, *a, |_| g[0] / n);
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let s = node.value.shape();
                    let gt = transpose2(g, s[0], s[1]);
                    let ga = self.acc(grads, *a);
                    for (x, y) in ga.iter_mut().zip(gt) {
                        *x += y;
                    }
                }
            }
            Op::Reshape(a) => self.acc_map(grads, *a, |j| g[j]),
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.shape(*table)[1];
                    let gt = self.acc(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = out.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.requires_grad(p) {
                        let gp = self.acc(grads, p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention_backward(*geom, self.data(*q), self.data(*k), self.data(*v), probs, g);
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.requires_grad(var) {
                        let gv = self.acc(grads, var);
                        for (x, y) in gv.iter_mut().zip(d) {
                            *x += y;
                        }
                    }
                }
            }
            Op::StraightThrough { soft } => self.acc_map(grads, *soft, |_| g[0]),
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.requires_grad(v) {
            return;
        }
        for (j, x) in self.acc(grads, v).iter_mut().enumerate() {
            *x += f(j);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn guard<T: Float>(x: T) -> T {
    let eps = T::from_f64c(DIV_GUARD);
    if x.abs() >= eps {
        x
    } else if x < T::zero() {
        -eps
    } else {
        eps
    }
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Strided `c (+)= alpha · op(a)·op(b)` over sub-blocks of larger buffers.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_view<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    (rsa, csa): (usize, usize),
    b: *const T,
    (rsb, csb): (usize, usize),
    beta: T,
    c: *mut T,
    (rsc, csc): (usize, usize),
) {
    T::gemm(
        m, k, n, alpha, a, rsa as isize, csa as isize, b, rsb as isize, csb as isize, beta, c,
        rsc as isize, csc as isize,
    )
}

fn attention_forward<T: Float>(geom: AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        seq,
        heads,
        head_dim,
    } = geom;
    let width = heads * head_dim;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * head_dim;
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // SAFETY: views stay within q/k/out; p is a distinct buffer.
            unsafe {
                gemm_view(
                    seq,
                    head_dim,
                    seq,
                    scale,
                    q.as_ptr().add(off),
                    (width, 1),
                    k.as_ptr().add(off),
                    (1, width),
                    T::zero(),
                    p.as_mut_ptr(),
                    (seq, 1),
                );
            }
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                softmax_in_place(&mut row[..=i]);
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            unsafe {
                gemm_view(
                    seq,
                    seq,
                    head_dim,
                    T::one(),
                    p.as_ptr(),
                    (seq, 1),
                    v.as_ptr().add(off),
                    (width, 1),
                    T::zero(),
                    out.as_mut_ptr().add(off),
                    (width, 1),
                );
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Float>(
    geom: AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        seq,
        heads,
        head_dim,
    } = geom;
    let width = heads * head_dim;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * head_dim;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            unsafe {
                // dV = Pᵀ·dO
                gemm_view(
                    seq,
                    seq,
                    head_dim,
                    T::one(),
                    p.as_ptr(),
                    (1, seq),
                    g.as_ptr().add(off),
                    (width, 1),
                    T::zero(),
                    dv.as_mut_ptr().add(off),
                    (width, 1),
                );
                // dP = dO·Vᵀ
                gemm_view(
                    seq,
                    head_dim,
                    seq,
                    T::one(),
                    g.as_ptr().add(off),
                    (width, 1),
                    v.as_ptr().add(off),
                    (1, width),
                    T::zero(),
                    dp.as_mut_ptr(),
                    (seq, 1),
                );
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            unsafe {
                // dQ = scale · dS·K
                gemm_view(
                    seq,
                    seq,
                    head_dim,
                    scale,
                    dp.as_ptr(),
                    (seq, 1),
                    k.as_ptr().add(off),
                    (width, 1),
                    T::zero(),
                    dq.as_mut_ptr().add(off),
                    (width, 1),
                );
                // dK = scale · dSᵀ·Q
                gemm_view(
                    seq,
                    seq,
                    head_dim,
                    scale,
                    dp.as_ptr(),
                    (1, seq),
                    q.as_ptr().add(off),
                    (width, 1),
                    T::zero(),
                    dk.as_mut_ptr().add(off),
                    (width, 1),
                );
            }
        }
    }
    (dq, dk, dv)
}
