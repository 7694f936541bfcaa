//! Monotonic alignment math.
//!
//! Every routine works on a `U×T` grid: target steps by source positions.
//! Source positions are 1-based in [`HardPath`] and 0-based as tensor
//! indices. The alignment before the first target step is one-hot at the
//! first source position.
//!
//! Mass that passes the final source position without being selected either
//! leaves the grid ([`EndOfSource::Spill`]) or is assigned to the final
//! position ([`EndOfSource::Absorb`]), which matches the hard process where
//! a head that never selects stops at the last source state.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CumKind, CumMode, Graph, Tensor, Var};

/// Probability clamp keeping `p` inside `[ε, 1-ε]`.
pub const EPSILON_P: f64 = 1e-6;
/// Lower clamp for the cumulative-product denominator of the parallel form.
pub const EPSILON_DENOM: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndOfSource {
    Spill,
    #[default]
    Absorb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Select when `p > 0.5` (strict).
    Threshold,
    Bernoulli,
}

/// Selection probabilities `p[U, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionProbs<S> {
    p: Tensor<S>,
    epsilon_p: f64,
}

impl<S: Scalar> SelectionProbs<S> {
    /// Clamps `p` into `[epsilon_p, 1 - epsilon_p]`.
    pub fn new(p: Tensor<S>, epsilon_p: f64) -> Result<Self> {
        check_grid(&p)?;
        let (lo, hi) = (S::from_acc(epsilon_p), S::from_acc(1.0 - epsilon_p));
        Ok(Self { p: p.map(|v| v.max(lo).min(hi)), epsilon_p })
    }

    /// Wraps probabilities without clamping; used by oracles and domain checks.
    pub fn unclamped(p: Tensor<S>) -> Result<Self> {
        check_grid(&p)?;
        Ok(Self { p, epsilon_p: 0.0 })
    }

    pub fn p(&self) -> &Tensor<S> {
        &self.p
    }

    pub fn epsilon_p(&self) -> f64 {
        self.epsilon_p
    }

    pub fn target_len(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn source_len(&self) -> usize {
        self.p.shape()[1]
    }
}

fn check_grid<S: Scalar>(t: &Tensor<S>) -> Result<()> {
    if t.ndim() != 2 || t.is_empty() {
        return Err(shape_err(format!("expected a non-empty U×T grid, got {:?}", t.shape())));
    }
    Ok(())
}

/// Expected alignment `α[U, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedAlignment<S> {
    pub alpha: Tensor<S>,
}

/// Infinite-lookback attention `β[U, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LookbackAttention<S> {
    pub beta: Tensor<S>,
}

/// Hard source positions per target step, 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardPath {
    pub t: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Energies and probabilities
// ---------------------------------------------------------------------------

/// Scaled dot-product energies `e = (q Wq)(k Wk)^T / sqrt(d_k) + offset`.
///
/// `query` is `[U, d_model]` (or `[d_model]` for a single step), `keys` is
/// `[T, d_model]`, projections are `[d_model, d_k]`.
pub fn monotonic_energy_on<S: Scalar>(
    g: &mut Graph<S>,
    query: Var,
    keys: Var,
    proj_q: Var,
    proj_k: Var,
    offset: Option<Var>,
) -> Result<Var> {
    let q = if g.shape(query).len() == 1 {
        let d = g.shape(query)[0];
        g.reshape(query, &[1, d])?
    } else {
        query
    };
    let dq = g.shape(proj_q).to_vec();
    let dk = g.shape(proj_k).to_vec();
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] || dq[1] == 0 {
        return Err(shape_err(format!("projection shapes {dq:?} and {dk:?} must both map d_model -> d_k")));
    }
    let qp = g.matmul(q, proj_q)?;
    let kp = g.matmul(keys, proj_k)?;
    let kt = g.transpose_last2(kp)?;
    let e = g.matmul(qp, kt)?;
    let mut e = g.scale(e, S::from_acc(1.0 / (dq[1] as f64).sqrt()));
    if let Some(off) = offset {
        let shape = g.shape(e).to_vec();
        let o = g.reshape(off, &[1])?;
        let o = g.expand(o, 0, shape[1])?;
        let o = g.reshape(o, &[shape[1]])?;
        e = g.add(e, o)?;
    }
    Ok(e)
}

/// Soft (lookback) energies: same form as [`monotonic_energy_on`] with a
/// separate pair of projections and no offset.
pub fn soft_energy_on<S: Scalar>(g: &mut Graph<S>, query: Var, keys: Var, proj_q: Var, proj_k: Var) -> Result<Var> {
    monotonic_energy_on(g, query, keys, proj_q, proj_k, None)
}

/// Plain-value version of [`monotonic_energy_on`] for a single query row.
pub fn monotonic_energy<S: Scalar>(
    query: &Tensor<S>,
    keys: &Tensor<S>,
    proj_q: &Tensor<S>,
    proj_k: &Tensor<S>,
    offset: f64,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (q, k) = (g.constant(query.clone()), g.constant(keys.clone()));
    let (wq, wk) = (g.constant(proj_q.clone()), g.constant(proj_k.clone()));
    let off = g.constant(Tensor::scalar(S::from_acc(offset)));
    let e = monotonic_energy_on(&mut g, q, k, wq, wk, Some(off))?;
    let t = g.value(e).clone();
    let n = t.len();
    t.reshape(&[n])
}

pub fn soft_energy<S: Scalar>(
    query: &Tensor<S>,
    keys: &Tensor<S>,
    proj_q: &Tensor<S>,
    proj_k: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (q, k) = (g.constant(query.clone()), g.constant(keys.clone()));
    let (wq, wk) = (g.constant(proj_q.clone()), g.constant(proj_k.clone()));
    let e = soft_energy_on(&mut g, q, k, wq, wk)?;
    let t = g.value(e).clone();
    let n = t.len();
    t.reshape(&[n])
}

/// `p = clamp(sigmoid(e + noise))`; noise is zero-mean normal with variance
/// `noise_var`, drawn only in training mode.
pub fn selection_probs_on<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    energy: Var,
    training: bool,
    noise_var: f64,
    epsilon_p: f64,
    rng: &mut R,
) -> Result<Var> {
    if noise_var < 0.0 {
        return Err(contract(format!("noise variance {noise_var} is negative")));
    }
    let mut e = energy;
    if training && noise_var > 0.0 {
        let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite std");
        let shape = g.shape(energy).to_vec();
        let noise: Vec<S> = (0..g.value(energy).len()).map(|_| S::from_acc(normal.sample(rng))).collect();
        let n = g.constant(Tensor::new(shape, noise)?);
        e = g.add(e, n)?;
    }
    let p = g.sigmoid(e);
    Ok(g.clamp(p, S::from_acc(epsilon_p), S::from_acc(1.0 - epsilon_p)))
}

pub fn selection_probs<S: Scalar, R: Rng + ?Sized>(
    energy: &Tensor<S>,
    training: bool,
    noise_var: f64,
    epsilon_p: f64,
    rng: &mut R,
) -> Result<SelectionProbs<S>> {
    let mut g = Graph::new();
    let e = g.constant(energy.clone());
    let p = selection_probs_on(&mut g, e, training, noise_var, epsilon_p, rng)?;
    Ok(SelectionProbs { p: g.value(p).clone(), epsilon_p })
}

// ---------------------------------------------------------------------------
// Expected alignment
// ---------------------------------------------------------------------------

/// Recurrent expected alignment, computed literally as
/// `α_{i,j} = p_{i,j} ((1 - p_{i,j-1}) α_{i,j-1} / p_{i,j-1} + α_{i-1,j})`.
///
/// Divides by `p`, so any zero probability is a domain error.
pub fn expected_alignment_recurrent<S: Scalar>(p: &SelectionProbs<S>, end: EndOfSource) -> Result<ExpectedAlignment<S>> {
    if p.p.data().iter().any(|&v| v <= S::zero()) {
        return Err(Error::Domain("recurrent expected alignment divides by p; clamp p away from 0".into()));
    }
    let (u, t) = (p.target_len(), p.source_len());
    let pd = p.p.data();
    let mut alpha = vec![0.0f64; u * t];
    let mut prev: Vec<f64> = (0..t).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
    for i in 0..u {
        let row = &pd[i * t..(i + 1) * t];
        for j in 0..t {
            let pj = row[j].to_acc();
            let carried = if j == 0 {
                0.0
            } else {
                let pp = row[j - 1].to_acc();
                (1.0 - pp) * alpha[i * t + j - 1] / pp
            };
            alpha[i * t + j] = pj * (carried + prev[j]);
        }
        if end == EndOfSource::Absorb {
            let s: f64 = alpha[i * t..(i + 1) * t].iter().sum();
            alpha[i * t + t - 1] += 1.0 - s;
        }
        prev.copy_from_slice(&alpha[i * t..(i + 1) * t]);
    }
    Ok(ExpectedAlignment { alpha: Tensor::from_f64(&[u, t], &alpha)? })
}

/// Adds `1 - Σ_j a_j` to the last entry of every row of `a[..., T]`.
fn absorb_on<S: Scalar>(g: &mut Graph<S>, a: Var) -> Result<Var> {
    let nd = g.shape(a).len();
    let t = g.shape(a)[nd - 1];
    let s = g.sum_lastdim(a)?;
    let resid = g.rsub_scalar(S::one(), s);
    let spread = g.expand(resid, nd - 1, t)?;
    let mut last = vec![S::zero(); t];
    last[t - 1] = S::one();
    let last = g.constant(Tensor::from_vec(last));
    let add = g.mul(spread, last)?;
    g.add(a, add)
}

/// Closed-form parallel expected alignment over `p[..., U, T]`:
///
/// `α_i = p_i ⊙ cumprod_excl(1 - p_i) ⊙ cumsum(α_{i-1} / clamp(cumprod_excl(1 - p_i), ε, 1))`.
///
/// The clamp bounds the division but discards mass whenever the exclusive
/// cumulative product falls below `epsilon_denom`, i.e. when probabilities
/// before the previous position are close to 1.
pub fn expected_alignment_parallel_on<S: Scalar>(
    g: &mut Graph<S>,
    p: Var,
    epsilon_denom: f64,
    end: EndOfSource,
) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() < 2 {
        return Err(shape_err(format!("expected [..., U, T], got {shape:?}")));
    }
    let nd = shape.len();
    let (u, t) = (shape[nd - 2], shape[nd - 1]);
    let one_minus = g.rsub_scalar(S::one(), p);
    let cp = g.cumulative(one_minus, CumKind::Product, CumMode::Exclusive);
    let denom = g.clamp(cp, S::from_acc(epsilon_denom), S::one());
    let pc = g.mul(p, cp)?;
    let mut row_shape = shape[..nd - 2].to_vec();
    row_shape.push(t);
    let mut init = Tensor::zeros(&row_shape);
    for row in init.data_mut().chunks_mut(t) {
        row[0] = S::one();
    }
    let mut prev = g.constant(init);
    let mut rows = Vec::with_capacity(u);
    for i in 0..u {
        let d_i = g.select(denom, nd - 2, i)?;
        let pc_i = g.select(pc, nd - 2, i)?;
        let ratio = g.div(prev, d_i)?;
        let cs = g.cumulative(ratio, CumKind::Sum, CumMode::Inclusive);
        let mut a_i = g.mul(pc_i, cs)?;
        if end == EndOfSource::Absorb {
            a_i = absorb_on(g, a_i)?;
        }
        rows.push(a_i);
        prev = a_i;
    }
    g.stack(&rows, nd - 2)
}

/// Division-free first-order scan of the same recurrence; stable for
/// saturated probabilities.
pub fn expected_alignment_scan_on<S: Scalar>(g: &mut Graph<S>, p: Var, end: EndOfSource) -> Result<Var> {
    g.monotonic_scan(p, end == EndOfSource::Absorb)
}

pub fn expected_alignment_parallel<S: Scalar>(
    p: &SelectionProbs<S>,
    epsilon_denom: f64,
    end: EndOfSource,
) -> Result<ExpectedAlignment<S>> {
    if !(epsilon_denom > 0.0 && epsilon_denom < 1.0) {
        return Err(contract(format!("epsilon_denom {epsilon_denom} must lie in (0, 1)")));
    }
    let mut g = Graph::new();
    let pv = g.constant(p.p.clone());
    let a = expected_alignment_parallel_on(&mut g, pv, epsilon_denom, end)?;
    Ok(ExpectedAlignment { alpha: g.value(a).clone() })
}

pub fn expected_alignment_scan<S: Scalar>(p: &SelectionProbs<S>, end: EndOfSource) -> Result<ExpectedAlignment<S>> {
    let mut g = Graph::new();
    let pv = g.constant(p.p.clone());
    let a = expected_alignment_scan_on(&mut g, pv, end)?;
    Ok(ExpectedAlignment { alpha: g.value(a).clone() })
}

// ---------------------------------------------------------------------------
// Infinite lookback
// ---------------------------------------------------------------------------

/// Lookback attention `β_{i,j} = Σ_{k≥j} α_{i,k} exp(u_{i,j}) / Σ_{l≤k} exp(u_{i,l})`
/// over `[..., U, T]` inputs.
///
/// Each prefix `k` gets its own softmax over positions `1..=k` (with its own
/// max subtraction), and `β_i = α_i · S_i` where `S_i[k, :]` is that softmax.
pub fn milk_attention_on<S: Scalar>(g: &mut Graph<S>, alpha: Var, u: Var) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    if shape != g.shape(u) || shape.len() < 2 {
        return Err(shape_err(format!("milk attention: α {shape:?} vs u {:?}", g.shape(u))));
    }
    let nd = shape.len();
    let t = shape[nd - 1];
    let prefix = g.expand(u, nd - 1, t)?;
    let mut mask = vec![S::zero(); t * t];
    for k in 0..t {
        for l in k + 1..t {
            mask[k * t + l] = S::neg_infinity();
        }
    }
    let mask = g.constant(Tensor::new(vec![t, t], mask)?);
    let masked = g.add(prefix, mask)?;
    let weights = g.softmax_lastdim(masked)?;
    let mut row_shape = shape.clone();
    row_shape.insert(nd - 1, 1);
    let a = g.reshape(alpha, &row_shape)?;
    let b = g.matmul(a, weights)?;
    g.reshape(b, &shape)
}

pub fn milk_attention<S: Scalar>(alpha: &ExpectedAlignment<S>, u: &Tensor<S>) -> Result<LookbackAttention<S>> {
    let mut g = Graph::new();
    let a = g.constant(alpha.alpha.clone());
    let uv = g.constant(u.clone());
    let b = milk_attention_on(&mut g, a, uv)?;
    Ok(LookbackAttention { beta: g.value(b).clone() })
}

// ---------------------------------------------------------------------------
// Hard paths and the enumeration oracle
// ---------------------------------------------------------------------------

/// Runs the hard selection process: for each target step scan forward from
/// the previous position and stop at the first selected position; a step
/// that never selects stops at the last source position.
pub fn sample_hard_path<S: Scalar, R: Rng + ?Sized>(p: &SelectionProbs<S>, mode: SampleMode, rng: &mut R) -> HardPath {
    let (u, t) = (p.target_len(), p.source_len());
    let pd = p.p.data();
    let mut path = Vec::with_capacity(u);
    let mut start = 0;
    for i in 0..u {
        let mut chosen = t - 1;
        for j in start..t {
            let pij = pd[i * t + j].to_acc();
            let select = match mode {
                SampleMode::Threshold => pij > 0.5,
                SampleMode::Bernoulli => rng.gen::<f64>() < pij,
            };
            if select {
                chosen = j;
                break;
            }
        }
        path.push(chosen + 1);
        start = chosen;
    }
    HardPath { t: path }
}

/// Largest grid the enumeration oracle accepts.
pub const ORACLE_MAX_TARGET: usize = 3;
pub const ORACLE_MAX_SOURCE: usize = 6;

/// Exact expected alignment by enumerating every Bernoulli outcome
/// `z ∈ {0,1}^{U×T}` and simulating the hard process under each.
///
/// With [`EndOfSource::Absorb`] a step that selects nothing stops at `T`;
/// with [`EndOfSource::Spill`] the path ends there and contributes no mass
/// to that step or any later one.
pub fn enumerate_alignment_oracle<S: Scalar>(p: &SelectionProbs<S>, end: EndOfSource) -> Result<ExpectedAlignment<f64>> {
    let (u, t) = (p.target_len(), p.source_len());
    if u > ORACLE_MAX_TARGET || t > ORACLE_MAX_SOURCE {
        return Err(contract(format!(
            "enumeration oracle limited to U <= {ORACLE_MAX_TARGET}, T <= {ORACLE_MAX_SOURCE}; got {u}×{t}"
        )));
    }
    let pd: Vec<f64> = p.p.data().iter().map(|v| v.to_acc()).collect();
    let cells = u * t;
    let mut alpha = vec![0.0f64; cells];
    for z in 0u64..(1u64 << cells) {
        let bit = |k: usize| (z >> k) & 1 == 1;
        let weight: f64 = (0..cells).map(|k| if bit(k) { pd[k] } else { 1.0 - pd[k] }).product();
        if weight == 0.0 {
            continue;
        }
        let mut start = 0;
        for i in 0..u {
            let hit = (start..t).find(|&j| bit(i * t + j));
            let pos = match (hit, end) {
                (Some(j), _) => j,
                (None, EndOfSource::Absorb) => t - 1,
                (None, EndOfSource::Spill) => break,
            };
            alpha[i * t + pos] += weight;
            start = pos;
        }
    }
    Ok(ExpectedAlignment { alpha: Tensor::new(vec![u, t], alpha)? })
}
