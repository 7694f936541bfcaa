use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{contract, shape_err, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CumKind {
    Sum,
    Product,
}

/// Exclusive scans start from the identity: the exclusive product of
/// `[a, b, c]` is `[1, a, ab]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CumMode {
    Inclusive,
    Exclusive,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MulConst(Var, Vec<S>),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Cumulative(Var, CumKind, CumMode),
    Clamp(Var, S, S),
    Sum(Var),
    SumLast(Var),
    Expand { x: Var, outer: usize, n: usize, inner: usize },
    Select { x: Var, outer: usize, n: usize, inner: usize, index: usize },
    Stack { xs: Vec<Var>, outer: usize, inner: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, normalized: Vec<S>, rstd: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: S, probs: Vec<S> },
    Dal { g: Var, took_prev: Vec<bool> },
    MonotonicScan { p: Var, absorb: bool, q: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so operands always precede the
/// nodes that consume them. Leaf gradients accumulate across calls to
/// [`Graph::backward`] until [`Graph::zero_grad`] is called; intermediate
/// gradients are recomputed on every call.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise binary ops (rhs may broadcast over leading dims) ----

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !suffix_of(bv.shape(), av.shape()) {
            return Err(shape_err(format!(
                "{name}: rhs shape {:?} does not match or trail lhs shape {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let nb = bv.len().max(1);
        let data = av.data().iter().enumerate().map(|(k, &x)| f(x, bv.data()[k % nb])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: S, x: Var) -> Var {
        let neg = self.scale(x, -S::one());
        self.add_scalar(neg, c)
    }

    /// Elementwise product with a non-differentiable constant of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(shape_err(format!("mul_const: mask of {} values for shape {:?}", mask.len(), xv.shape())));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, mask), rg))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` at train time;
    /// identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = S::from_acc(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    // ---- linear algebra and layout ----

    /// Batched matrix product `[..., n, k] × [..., k, m]`; the rhs may also be
    /// a plain `[k, m]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ash, bsh) = (av.shape(), bv.shape());
        let err = || shape_err(format!("matmul: incompatible shapes {ash:?} and {bsh:?}"));
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(err());
        }
        let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        if k != k2 || !(b_batch.is_empty() || b_batch == a_batch) {
            return Err(err());
        }
        let batch: usize = a_batch.iter().product();
        let shared = b_batch.is_empty();
        let mut out = vec![S::zero(); batch * n * m];
        for bi in 0..batch {
            let a_s = &av.data()[bi * n * k..(bi + 1) * n * k];
            let b_s = if shared { bv.data() } else { &bv.data()[bi * k * m..(bi + 1) * k * m] };
            kernels::gemm(a_s, b_s, &mut out[bi * n * m..(bi + 1) * n * m], n, k, m, false);
        }
        let mut shape = a_batch.to_vec();
        shape.extend([n, m]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..xv.ndim()).collect::<Vec<_>>() {
            return Err(shape_err(format!("permute: axes {axes:?} invalid for shape {:?}", xv.shape())));
        }
        let (data, shape) = kernels::permute(xv.data(), xv.shape(), axes);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(shape_err("transpose_last2 needs at least 2 dims"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- unary nonlinearities ----

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            // branch keeps exp() argument non-positive
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(S::zero()))
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax over the last dimension with max subtraction. Entries equal
    /// to `-inf` receive zero probability.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if xv.ndim() == 0 || n == 0 {
            return Err(shape_err(format!("softmax_lastdim: empty last dimension in {:?}", xv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Scan along the last dimension.
    pub fn cumulative(&mut self, x: Var, kind: CumKind, mode: CumMode) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.rows() {
            let mut acc = match kind {
                CumKind::Sum => S::zero(),
                CumKind::Product => S::one(),
            };
            for &v in row {
                let next = match kind {
                    CumKind::Sum => acc + v,
                    CumKind::Product => acc * v,
                };
                data.push(if mode == CumMode::Inclusive { next } else { acc });
                acc = next;
            }
        }
        debug_assert!(n == 0 || data.len() == xv.len());
        let t = Tensor::new(xv.shape().to_vec(), data).expect("scan preserves shape");
        let rg = self.rg(x);
        self.push(t, Op::Cumulative(x, kind, mode), rg)
    }

    // ---- reductions and axis manipulation ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = S::from_acc(self.value(x).data().iter().map(|v| v.to_acc()).sum());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, S::from_acc(1.0 / n as f64))
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(shape_err("sum_lastdim on a scalar"));
        }
        let data = xv.rows().map(|r| S::from_acc(r.iter().map(|v| v.to_acc()).sum())).collect();
        let t = Tensor::new(xv.shape()[..xv.ndim() - 1].to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumLast(x), rg))
    }

    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let s = self.sum_lastdim(x)?;
        Ok(self.scale(s, S::from_acc(1.0 / n as f64)))
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the data.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis > xv.ndim() {
            return Err(shape_err(format!("expand: axis {axis} out of range for {:?}", xv.shape())));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(xv.len() * n);
        for o in 0..outer {
            let block = &xv.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.insert(axis, n);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Expand { x, outer, n, inner }, rg))
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || index >= xv.shape()[axis] {
            return Err(shape_err(format!("select: index {index} on axis {axis} out of range for {:?}", xv.shape())));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let n = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&xv.data()[start..start + inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Select { x, outer, n, inner, index }, rg))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("stack of zero tensors"))?;
        let shape0 = self.value(*first).shape().to_vec();
        if axis > shape0.len() {
            return Err(shape_err(format!("stack: axis {axis} out of range for {shape0:?}")));
        }
        for &v in xs {
            if self.value(v).shape() != shape0.as_slice() {
                return Err(shape_err(format!("stack: shapes {:?} and {shape0:?} differ", self.value(v).shape())));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = shape0;
        shape.insert(axis, xs.len());
        let t = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Stack { xs: xs.to_vec(), outer, inner }, rg))
    }

    // ---- fused model ops ----

    /// Row lookup `table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(shape_err(format!("embedding table must be 2-D, got {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(contract(format!("token id {id} outside vocabulary of {rows}")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut normalized = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / n.max(1));
        for row in xv.rows() {
            let mean = row.iter().map(|v| v.to_acc()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_acc() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(S::from_acc(r));
            normalized.extend(row.iter().map(|v| S::from_acc((v.to_acc() - mean) * r)));
        }
        let t = Tensor::new(xv.shape().to_vec(), normalized.clone()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, normalized, rstd }, rg)
    }

    /// Summed label-smoothed cross entropy of `logits[n, V]` against `targets`.
    /// The smoothed target puts `1 - smoothing` on the gold class and spreads
    /// `smoothing` uniformly over all classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err(format!(
                "cross_entropy: logits {:?} vs {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let v = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(contract(format!("target {t} outside {v} classes")));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_acc()));
            let lse = max + row.iter().map(|x| (x.to_acc() - max).exp()).sum::<f64>().ln();
            let mean_logp = row.iter().map(|x| x.to_acc() - lse).sum::<f64>() / v as f64;
            let gold = row[t].to_acc() - lse;
            total += -(1.0 - smoothing) * gold - smoothing * mean_logp;
            for x in row.iter_mut() {
                *x = S::from_acc((x.to_acc() - lse).exp());
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(S::from_acc(total)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing: S::from_acc(smoothing), probs },
            rg,
        ))
    }

    /// Differentiable Average Lagging of a delay vector `g[U]` for a source of
    /// `src_len` tokens: `g'_1 = g_1`, `g'_i = max(g_i, g'_{i-1} + T/U)` and
    /// `DAL = (1/U) Σ_i (g'_i - (i-1) T/U)`.
    pub fn differentiable_average_lagging(&mut self, g: Var, src_len: usize) -> Result<Var> {
        let gv = self.value(g);
        if gv.ndim() != 1 || gv.is_empty() {
            return Err(shape_err(format!("DAL expects a non-empty delay vector, got {:?}", gv.shape())));
        }
        let u = gv.len();
        let step = src_len as f64 / u as f64;
        let mut took_prev = vec![false; u];
        let mut prev = 0.0f64;
        let mut total = 0.0f64;
        for (i, gi) in gv.data().iter().enumerate() {
            let gi = gi.to_acc();
            let cur = if i > 0 && prev + step > gi {
                took_prev[i] = true;
                prev + step
            } else {
                gi
            };
            total += cur - i as f64 * step;
            prev = cur;
        }
        let rg = self.rg(g);
        Ok(self.push(
            Tensor::scalar(S::from_acc(total / u as f64)),
            Op::Dal { g, took_prev },
            rg,
        ))
    }

    /// Expected monotonic alignment by the stable first-order recurrence
    ///
    /// `q_1 = a_1`, `q_j = (1 - p_{j-1}) q_{j-1} + a_j`, `α_j = p_j q_j`,
    ///
    /// where `a` is the previous target row's alignment (one-hot at the first
    /// source position before the first row). Operates on `p[..., U, T]`.
    /// With `absorb`, the mass that would fall past the final source position
    /// is assigned to it instead.
    pub fn monotonic_scan(&mut self, p: Var, absorb: bool) -> Result<Var> {
        let pv = self.value(p);
        if pv.ndim() < 2 {
            return Err(shape_err(format!("monotonic_scan expects [..., U, T], got {:?}", pv.shape())));
        }
        let t_len = pv.shape()[pv.ndim() - 1];
        let u_len = pv.shape()[pv.ndim() - 2];
        let batch = pv.len() / (t_len * u_len).max(1);
        let mut alpha = vec![S::zero(); pv.len()];
        let mut q = vec![S::zero(); pv.len()];
        for b in 0..batch {
            let base = b * u_len * t_len;
            let mut prev: Vec<S> = (0..t_len).map(|j| if j == 0 { S::one() } else { S::zero() }).collect();
            for i in 0..u_len {
                let off = base + i * t_len;
                let prow = &pv.data()[off..off + t_len];
                let mut acc = S::zero();
                let mut total = S::zero();
                for j in 0..t_len {
                    acc = if j == 0 { prev[0] } else { (S::one() - prow[j - 1]) * acc + prev[j] };
                    q[off + j] = acc;
                    let r = prow[j] * acc;
                    alpha[off + j] = r;
                    total += r;
                }
                if absorb && t_len > 0 {
                    alpha[off + t_len - 1] += S::one() - total;
                }
                prev.copy_from_slice(&alpha[off..off + t_len]);
            }
        }
        let t = Tensor::new(pv.shape().to_vec(), alpha)?;
        let rg = self.rg(p);
        Ok(self.push(t, Op::MonotonicScan { p, absorb, q }, rg))
    }

    // ---- backward ----

    /// Back-propagates from a scalar `root`, adding into every leaf that
    /// requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        // sums a full-size gradient down to a trailing-suffix operand
        let reduce = |full: &[S], n: usize| -> Vec<S> {
            let mut out = vec![S::zero(); n];
            for (k, &v) in full.iter().enumerate() {
                out[k % n] += v;
            }
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, reduce(g, val(*b).len()));
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                let r = reduce(g, val(*b).len());
                send(*b, r.into_iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if self.nodes[a.0].requires_grad {
                    send(*a, g.iter().enumerate().map(|(k, &gk)| gk * bv[k % nb]).collect());
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<S> = g.iter().zip(av).map(|(&gk, &ak)| gk * ak).collect();
                    send(*b, reduce(&full, nb));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let nb = bv.len();
                if self.nodes[a.0].requires_grad {
                    send(*a, g.iter().enumerate().map(|(k, &gk)| gk / bv[k % nb]).collect());
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<S> = g.iter().enumerate().map(|(k, &gk)| -gk * y[k] / bv[k % nb]).collect();
                    send(*b, reduce(&full, nb));
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::MulConst(x, m) => send(*x, g.iter().zip(m).map(|(&a, &b)| a * b).collect()),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, &mut send),
            Op::Permute(x, axes) => {
                let (data, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                send(*x, data);
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut out = Vec::with_capacity(g.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| S::from_acc(yv.to_acc() * (gv.to_acc() - dot))));
                }
                send(*x, out);
            }
            Op::Sigmoid(x) => send(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (S::one() - yv)).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()),
            Op::Log(x) => send(*x, g.iter().zip(val(*x)).map(|(&gv, &xv)| gv / xv).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter().zip(val(*x)).map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() }).collect(),
            ),
            Op::Clamp(x, lo, hi) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { S::zero() })
                    .collect(),
            ),
            Op::Cumulative(x, kind, mode) => {
                let n = node.value.last_dim();
                let xv = val(*x);
                let mut out = vec![S::zero(); g.len()];
                for ((gr, xr), or) in g.chunks(n).zip(xv.chunks(n)).zip(out.chunks_mut(n)) {
                    cumulative_backward(*kind, *mode, gr, xr, or);
                }
                send(*x, out);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::SumLast(x) => {
                let n = self.nodes[x.0].value.last_dim();
                send(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect());
            }
            Op::Expand { x, outer, n, inner } => {
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..*outer {
                    for r in 0..*n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                send(*x, out);
            }
            Op::Select { x, outer, n, inner, index } => {
                let mut out = vec![S::zero(); outer * n * inner];
                for o in 0..*outer {
                    let dst = (o * n + index) * inner;
                    out[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                send(*x, out);
            }
            Op::Stack { xs, outer, inner } => {
                let n = xs.len();
                for (vi, &v) in xs.iter().enumerate() {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    let mut out = Vec::with_capacity(outer * inner);
                    for o in 0..*outer {
                        let src = (o * n + vi) * inner;
                        out.extend_from_slice(&g[src..src + inner]);
                    }
                    send(v, out);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let d = tv.shape()[1];
                let mut out = vec![S::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    out[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                }
                send(*table, out);
            }
            Op::LayerNorm { x, normalized, rstd } => {
                let n = node.value.last_dim();
                let nf = n as f64;
                let mut out = Vec::with_capacity(g.len());
                for ((gr, xr), &r) in g.chunks(n).zip(normalized.chunks(n)).zip(rstd) {
                    let sum_g: f64 = gr.iter().map(|v| v.to_acc()).sum();
                    let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
                    let r = r.to_acc();
                    out.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(gv, xh)| S::from_acc(r / nf * (nf * gv.to_acc() - sum_g - xh.to_acc() * sum_gx))),
                    );
                }
                send(*x, out);
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let v = self.nodes[logits.0].value.shape()[1];
                let uniform = *smoothing / S::from_acc(v as f64);
                let mut out = probs.clone();
                for (row, &t) in out.chunks_mut(v).zip(targets) {
                    for x in row.iter_mut() {
                        *x = (*x - uniform) * g[0];
                    }
                    row[t] -= (S::one() - *smoothing) * g[0];
                }
                send(*logits, out);
            }
            Op::Dal { g: gx, took_prev } => {
                let u = took_prev.len();
                let share = g[0] / S::from_acc(u as f64);
                let mut out = vec![S::zero(); u];
                let mut carry = S::zero();
                for i in (0..u).rev() {
                    let total = share + carry;
                    if took_prev[i] {
                        carry = total;
                    } else {
                        out[i] = total;
                        carry = S::zero();
                    }
                }
                send(*gx, out);
            }
            Op::MonotonicScan { p, absorb, q } => {
                let pv = &self.nodes[p.0].value;
                let t_len = pv.shape()[pv.ndim() - 1];
                let u_len = pv.shape()[pv.ndim() - 2];
                let batch = pv.len() / (t_len * u_len).max(1);
                let mut gp = vec![S::zero(); pv.len()];
                let mut gr = vec![S::zero(); t_len];
                for b in 0..batch {
                    let base = b * u_len * t_len;
                    let mut carry = vec![S::zero(); t_len];
                    for i in (0..u_len).rev() {
                        let off = base + i * t_len;
                        let prow = &pv.data()[off..off + t_len];
                        let qrow = &q[off..off + t_len];
                        let galpha: Vec<S> = (0..t_len).map(|j| g[off + j] + carry[j]).collect();
                        if *absorb {
                            let last = galpha[t_len - 1];
                            for j in 0..t_len {
                                gr[j] = galpha[j] - last;
                            }
                        } else {
                            gr.copy_from_slice(&galpha);
                        }
                        let mut gq_next = S::zero();
                        for j in (0..t_len).rev() {
                            let mut gq = gr[j] * prow[j];
                            gp[off + j] += gr[j] * qrow[j];
                            if j + 1 < t_len {
                                gq += (S::one() - prow[j]) * gq_next;
                                gp[off + j] -= qrow[j] * gq_next;
                            }
                            carry[j] = gq;
                            gq_next = gq;
                        }
                    }
                }
                send(*p, gp);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[S], send: &mut impl FnMut(Var, Vec<S>)) {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ash, bsh) = (av.shape(), bv.shape());
        let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let m = bsh[bsh.len() - 1];
        let batch = av.len() / (n * k).max(1);
        let shared = bsh.len() == 2;
        if self.nodes[a.0].requires_grad {
            let mut ga = vec![S::zero(); av.len()];
            for bi in 0..batch {
                let b_s = if shared { bv.data() } else { &bv.data()[bi * k * m..(bi + 1) * k * m] };
                let bt = kernels::transpose(b_s, k, m);
                kernels::gemm(&g[bi * n * m..(bi + 1) * n * m], &bt, &mut ga[bi * n * k..(bi + 1) * n * k], n, m, k, false);
            }
            send(a, ga);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![S::zero(); bv.len()];
            for bi in 0..batch {
                let at = kernels::transpose(&av.data()[bi * n * k..(bi + 1) * n * k], n, k);
                let dst = if shared { &mut gb[..] } else { &mut gb[bi * k * m..(bi + 1) * k * m] };
                kernels::gemm(&at, &g[bi * n * m..(bi + 1) * n * m], dst, k, n, m, shared);
            }
            send(b, gb);
        }
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        let e = if x.is_infinite() && *x < S::zero() { S::zero() } else { (*x - max).exp() };
        *x = e;
        sum += e.to_acc();
    }
    for x in row.iter_mut() {
        *x = S::from_acc(x.to_acc() / sum);
    }
}

fn cumulative_backward<S: Scalar>(kind: CumKind, mode: CumMode, g: &[S], x: &[S], out: &mut [S]) {
    let n = g.len();
    match kind {
        CumKind::Sum => {
            // gradient is the reverse scan of g
            let mut acc = S::zero();
            for j in (0..n).rev() {
                match mode {
                    CumMode::Inclusive => {
                        acc += g[j];
                        out[j] = acc;
                    }
                    CumMode::Exclusive => {
                        out[j] = acc;
                        acc += g[j];
                    }
                }
            }
        }
        CumKind::Product => {
            // out_k = P_{k-1} * R_k with P the exclusive prefix product; the
            // suffix term R obeys a first-order recurrence, so zeros in x are safe.
            let mut prefix = vec![S::one(); n];
            for j in 1..n {
                prefix[j] = prefix[j - 1] * x[j - 1];
            }
            let mut r = S::zero();
            for k in (0..n).rev() {
                r = match mode {
                    CumMode::Inclusive => {
                        if k + 1 < n {
                            g[k] + x[k + 1] * r
                        } else {
                            g[k]
                        }
                    }
                    CumMode::Exclusive => {
                        if k + 1 < n {
                            g[k + 1] + x[k + 1] * r
                        } else {
                            S::zero()
                        }
                    }
                };
                out[k] = prefix[k] * r;
            }
        }
    }
}
