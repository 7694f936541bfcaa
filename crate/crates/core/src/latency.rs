//! Latency losses for training and latency metrics for decoded output.
//!
//! Delays are counted in source tokens: `g_i` is the number of source
//! tokens read before target token `i` is written.

use std::fmt::Write as _;

use crate::error::{contract, shape_err, Result};
use crate::model::Variant;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Delays `g[U]` of one decoded sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayRecord {
    pub g: Vec<f64>,
    pub source_len: usize,
}

impl DelayRecord {
    pub fn new(g: Vec<f64>, source_len: usize) -> Result<Self> {
        if g.is_empty() || source_len == 0 {
            return Err(contract("delay record needs T >= 1 and U >= 1"));
        }
        if let Some(bad) = g.iter().find(|&&v| !(1.0..=source_len as f64).contains(&v)) {
            return Err(contract(format!("delay {bad} outside [1, {source_len}]")));
        }
        Ok(Self { g, source_len })
    }

    pub fn target_len(&self) -> usize {
        self.g.len()
    }

    /// Parses one `T<TAB>U<TAB>g_1,...,g_U` trace line.
    pub fn parse_trace_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if fields.len() != 3 {
            return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
        }
        let t: usize = fields[0].trim().parse().map_err(|_| format!("bad source length {:?}", fields[0]))?;
        let u: usize = fields[1].trim().parse().map_err(|_| format!("bad target length {:?}", fields[1]))?;
        let g = fields[2]
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad delay {s:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if g.len() != u {
            return Err(format!("U = {u} but {} delays given", g.len()));
        }
        Self::new(g, t).map_err(|e| e.to_string())
    }

    pub fn to_trace_line(&self) -> String {
        let mut s = format!("{}\t{}\t", self.source_len, self.g.len());
        for (i, v) in self.g.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v}").expect("write to string");
        }
        s
    }
}

/// Average Proportion: `(1 / (T U)) Σ_i g_i`.
pub fn metric_ap(d: &DelayRecord) -> f64 {
    d.g.iter().sum::<f64>() / (d.source_len as f64 * d.target_len() as f64)
}

/// Average Lagging over the steps up to the first one that has read the
/// whole source (all steps if none has).
pub fn metric_al(d: &DelayRecord) -> f64 {
    let (t, u) = (d.source_len as f64, d.target_len());
    let rate = t / u as f64;
    let tau = d.g.iter().position(|&v| v >= t).map_or(u, |i| i + 1);
    d.g[..tau].iter().enumerate().map(|(i, &gi)| gi - i as f64 * rate).sum::<f64>() / tau as f64
}

/// Differentiable Average Lagging.
pub fn metric_dal(d: &DelayRecord) -> f64 {
    let (t, u) = (d.source_len as f64, d.target_len());
    let rate = t / u as f64;
    let mut prev = 0.0;
    let mut total = 0.0;
    for (i, &gi) in d.g.iter().enumerate() {
        let cur = if i == 0 { gi } else { gi.max(prev + rate) };
        total += cur - i as f64 * rate;
        prev = cur;
    }
    total / u as f64
}

/// Mean over target steps of the gap between the furthest and the nearest
/// head. `positions[i]` holds every head's source position at step `i`.
pub fn attention_span(positions: &[Vec<usize>]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let total: usize = positions
        .iter()
        .map(|heads| {
            let max = heads.iter().copied().max().unwrap_or(0);
            let min = heads.iter().copied().min().unwrap_or(0);
            max - min
        })
        .sum();
    total as f64 / positions.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyReport {
    pub ap: f64,
    pub al: f64,
    pub dal: f64,
    pub avg_attention_span: f64,
    /// Mean over steps of the furthest head position.
    pub max_head_latency: f64,
}

impl LatencyReport {
    pub const CSV_HEADER: &'static str = "ap,al,dal,span,max_head_latency";

    /// `positions` may be empty for models without monotonic heads.
    pub fn from_decode(delays: &DelayRecord, positions: &[Vec<usize>]) -> Self {
        let max_head_latency = if positions.is_empty() {
            delays.g.iter().sum::<f64>() / delays.target_len() as f64
        } else {
            positions.iter().map(|h| h.iter().copied().max().unwrap_or(0) as f64).sum::<f64>() / positions.len() as f64
        };
        Self {
            ap: metric_ap(delays),
            al: metric_al(delays),
            dal: metric_dal(delays),
            avg_attention_span: attention_span(positions),
            max_head_latency,
        }
    }

    /// Arithmetic mean of per-sentence reports.
    pub fn mean(reports: &[Self]) -> Self {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&Self) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            ap: sum(|r| r.ap),
            al: sum(|r| r.al),
            dal: sum(|r| r.dal),
            avg_attention_span: sum(|r| r.avg_attention_span),
            max_head_latency: sum(|r| r.max_head_latency),
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.ap, self.al, self.dal, self.avg_attention_span, self.max_head_latency)
    }
}

// ---------------------------------------------------------------------------
// Training-time (differentiable) latency
// ---------------------------------------------------------------------------

/// Expected delays `G[L, H, U]` with `G[l,h,i] = Σ_j j α^{l,h}_{i,j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedDelayGrid<S> {
    pub delays: Tensor<S>,
}

impl<S: Scalar> ExpectedDelayGrid<S> {
    /// Largest expected delay over heads at each step.
    pub fn max_over_heads(&self) -> Vec<f64> {
        let sh = self.delays.shape();
        let (n, u) = (sh[0] * sh[1], sh[2]);
        (0..u)
            .map(|i| (0..n).map(|h| self.delays.data()[h * u + i].to_acc()).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// `Σ_j j α_{i,j}` over `α[..., U, T]`, giving `[..., U]`.
pub fn expected_delays_on<S: Scalar>(g: &mut Graph<S>, alpha: Var) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    if shape.len() < 2 {
        return Err(shape_err(format!("expected delays need [..., U, T], got {shape:?}")));
    }
    let t = shape[shape.len() - 1];
    let pos = g.constant(Tensor::new(vec![t, 1], (1..=t).map(|j| S::from_acc(j as f64)).collect())?);
    let d = g.matmul(alpha, pos)?;
    g.reshape(d, &shape[..shape.len() - 1])
}

/// Expected delays for per-layer alignments `α[L][H, U, T]`.
pub fn expected_delays<S: Scalar>(alpha_per_layer: &[Tensor<S>]) -> Result<ExpectedDelayGrid<S>> {
    let first = alpha_per_layer.first().ok_or_else(|| contract("no alignment layers"))?;
    let (h, u) = (first.shape()[0], first.shape()[1]);
    let mut g = Graph::new();
    let mut rows = Vec::new();
    for a in alpha_per_layer {
        let v = g.constant(a.clone());
        rows.push(expected_delays_on(&mut g, v)?);
    }
    let stacked = g.stack(&rows, 0)?;
    let t = g.value(stacked).clone().reshape(&[alpha_per_layer.len(), h, u])?;
    Ok(ExpectedDelayGrid { delays: t })
}

/// Weighted average latency loss over head delays `G[N, U]` (all `L·H`
/// heads flattened): per step the delays are weighted by their softmax over
/// heads and the resulting `g^W[U]` is scored with DAL.
pub fn weighted_average_latency_on<S: Scalar>(g: &mut Graph<S>, delays: Var, src_len: usize) -> Result<Var> {
    let w = weighted_delays_on(g, delays)?;
    g.differentiable_average_lagging(w, src_len)
}

/// Per-step softmax-weighted delay `g^W[U]` from `G[N, U]`.
pub fn weighted_delays_on<S: Scalar>(g: &mut Graph<S>, delays: Var) -> Result<Var> {
    if g.shape(delays).len() != 2 {
        return Err(shape_err(format!("head delays must be [N, U], got {:?}", g.shape(delays))));
    }
    let by_step = g.transpose_last2(delays)?;
    let w = g.softmax_lastdim(by_step)?;
    let weighted = g.mul(w, by_step)?;
    g.sum_lastdim(weighted)
}

/// Head divergence loss: population variance of head delays at each step,
/// averaged over steps. `delays` is `[N, U]`.
pub fn head_divergence_on<S: Scalar>(g: &mut Graph<S>, delays: Var) -> Result<Var> {
    if g.shape(delays).len() != 2 {
        return Err(shape_err(format!("head delays must be [N, U], got {:?}", g.shape(delays))));
    }
    let n = g.shape(delays)[0];
    let by_step = g.transpose_last2(delays)?;
    let mean = g.mean_lastdim(by_step)?;
    let mean = g.expand(mean, 1, n)?;
    let centered = g.sub(by_step, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_lastdim(sq)?;
    Ok(g.mean(var))
}

fn flat_heads<S: Scalar>(grid: &ExpectedDelayGrid<S>) -> Result<Tensor<S>> {
    let sh = grid.delays.shape();
    if sh.len() != 3 {
        return Err(shape_err(format!("delay grid must be [L, H, U], got {sh:?}")));
    }
    grid.delays.clone().reshape(&[sh[0] * sh[1], sh[2]])
}

pub fn weighted_average_latency_loss<S: Scalar>(grid: &ExpectedDelayGrid<S>, src_len: usize) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(flat_heads(grid)?);
    let l = weighted_average_latency_on(&mut g, d, src_len)?;
    Ok(g.value(l).item().to_acc())
}

pub fn weighted_delays<S: Scalar>(grid: &ExpectedDelayGrid<S>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let d = g.constant(flat_heads(grid)?);
    let w = weighted_delays_on(&mut g, d)?;
    Ok(g.value(w).to_f64_vec())
}

pub fn head_divergence_loss<S: Scalar>(grid: &ExpectedDelayGrid<S>) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(flat_heads(grid)?);
    let l = head_divergence_on(&mut g, d)?;
    Ok(g.value(l).item().to_acc())
}

/// `λ_avg` actually applied for a variant: hard monotonic heads train with
/// the divergence term only.
pub fn effective_lambda_avg(variant: Variant, lambda_avg: f64) -> f64 {
    match variant {
        Variant::MmaH => 0.0,
        _ => lambda_avg,
    }
}

/// `nll + λ_avg L_avg + λ_var L_var`.
pub fn total_loss(nll: f64, l_avg: f64, l_var: f64, variant: Variant, lambda_avg: f64, lambda_var: f64) -> f64 {
    if variant == Variant::MmaH && lambda_avg != 0.0 {
        log::warn!("lambda_avg = {lambda_avg} ignored for mma_h; only the divergence loss applies");
    }
    nll + effective_lambda_avg(variant, lambda_avg) * l_avg + lambda_var * l_var
}

pub fn total_loss_on<S: Scalar>(
    g: &mut Graph<S>,
    nll: Var,
    l_avg: Option<Var>,
    l_var: Option<Var>,
    variant: Variant,
    lambda_avg: f64,
    lambda_var: f64,
) -> Result<Var> {
    let mut total = nll;
    let la = effective_lambda_avg(variant, lambda_avg);
    if let Some(a) = l_avg.filter(|_| la != 0.0) {
        let t = g.scale(a, S::from_acc(la));
        total = g.add(total, t)?;
    }
    if let Some(v) = l_var.filter(|_| lambda_var != 0.0) {
        let t = g.scale(v, S::from_acc(lambda_var));
        total = g.add(total, t)?;
    }
    Ok(total)
}
