//! Gradient-check cases covering every differentiable graph operation.

use mma_core::tensor::{grad_check, GradCheckReport};
use mma_core::{CumKind, CumMode, Graph, Result, Tensor, Var};

use super::{rng, uniform, weighted_sum};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub type Op = fn(&mut Graph<f64>, Var) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub lo: f64,
    pub hi: f64,
    pub op: Op,
}

impl OpCase {
    /// Central-difference check of `Σ w ⊙ op(x)` at a random point in `[lo, hi)`.
    pub fn check(&self) -> GradCheckReport {
        let x = uniform::<f64>(self.shape, self.lo, self.hi, &mut rng(self.name.len() as u64));
        let op = self.op;
        grad_check(|g, v| op(g, v).and_then(|y| weighted_sum(g, y, 1)), &x, STEP, TOL).unwrap()
    }
}

fn case(name: &'static str, shape: &'static [usize], lo: f64, hi: f64, op: Op) -> OpCase {
    OpCase { name, shape, lo, hi, op }
}

fn konst(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
    g.constant(uniform(shape, 0.5, 1.5, &mut rng(seed)))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[2, 3], -1.0, 1.0, |g, x| {
            let c = konst(g, &[3], 1);
            g.add(x, c)
        }),
        case("add_self", &[4], -1.0, 1.0, |g, x| g.add(x, x)),
        case("sub", &[2, 3], -1.0, 1.0, |g, x| {
            let c = konst(g, &[2, 3], 2);
            let a = g.sub(x, c)?;
            g.sub(c, a)
        }),
        case("mul", &[3, 2], -1.0, 1.0, |g, x| {
            let c = konst(g, &[2], 3);
            let a = g.mul(x, c)?;
            g.mul(a, x)
        }),
        case("div", &[5], 0.5, 2.0, |g, x| {
            let c = konst(g, &[5], 4);
            let a = g.div(c, x)?;
            g.div(a, c)
        }),
        case("scale", &[4], -1.0, 1.0, |g, x| Ok(g.scale(x, -2.5))),
        case("add_scalar", &[4], -1.0, 1.0, |g, x| Ok(g.add_scalar(x, 3.0))),
        case("rsub_scalar", &[4], -1.0, 1.0, |g, x| Ok(g.rsub_scalar(1.0, x))),
        case("mul_const", &[4], -1.0, 1.0, |g, x| g.mul_const(x, vec![0.0, 2.0, -1.0, 0.5])),
        case("dropout", &[6], -1.0, 1.0, |g, x| g.dropout(x, 0.5, true, &mut rng(9))),
        case("sigmoid", &[6], -4.0, 4.0, |g, x| Ok(g.sigmoid(x))),
        case("exp", &[6], -2.0, 2.0, |g, x| Ok(g.exp(x))),
        case("log", &[6], 0.2, 3.0, |g, x| Ok(g.log(x))),
        case("relu", &[6], -1.0, 1.0, |g, x| Ok(g.relu(x))),
        case("clamp", &[8], -1.0, 1.0, |g, x| Ok(g.clamp(x, -0.5, 0.5))),
        case("matmul_lhs", &[3, 4], -1.0, 1.0, |g, x| {
            let b = konst(g, &[4, 2], 5);
            g.matmul(x, b)
        }),
        case("matmul_rhs", &[4, 2], -1.0, 1.0, |g, x| {
            let a = konst(g, &[3, 4], 6);
            g.matmul(a, x)
        }),
        case("matmul_batched", &[2, 3, 4], -1.0, 1.0, |g, x| {
            let xt = g.transpose_last2(x)?;
            g.matmul(x, xt)
        }),
        case("matmul_shared_rhs", &[2, 3, 4], -1.0, 1.0, |g, x| {
            let b = konst(g, &[4, 5], 7);
            g.matmul(x, b)
        }),
        case("permute", &[2, 3, 4], -1.0, 1.0, |g, x| g.permute(x, &[2, 0, 1])),
        case("reshape", &[2, 6], -1.0, 1.0, |g, x| g.reshape(x, &[3, 4])),
        case("expand", &[2, 3], -1.0, 1.0, |g, x| g.expand(x, 1, 4)),
        case("select", &[3, 4], -1.0, 1.0, |g, x| g.select(x, 1, 2)),
        case("stack", &[2, 3], -1.0, 1.0, |g, x| {
            let y = g.scale(x, 2.0);
            g.stack(&[x, y, x], 1)
        }),
        case("embedding", &[5, 3], -1.0, 1.0, |g, x| g.embedding(x, &[4, 0, 4, 2])),
        case("sum", &[3, 2], -1.0, 1.0, |g, x| Ok(g.sum(x))),
        case("mean", &[3, 2], -1.0, 1.0, |g, x| Ok(g.mean(x))),
        case("sum_lastdim", &[3, 4], -1.0, 1.0, |g, x| g.sum_lastdim(x)),
        case("mean_lastdim", &[3, 4], -1.0, 1.0, |g, x| g.mean_lastdim(x)),
        case("softmax", &[3, 5], -2.0, 2.0, |g, x| g.softmax_lastdim(x)),
        case("softmax_masked", &[2, 3], -2.0, 2.0, |g, x| {
            let m = g.constant(Tensor::new(vec![3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap());
            let y = g.add(x, m)?;
            g.softmax_lastdim(y)
        }),
        case("layer_norm", &[3, 6], -2.0, 2.0, |g, x| Ok(g.layer_norm(x, 1e-5))),
        case("cross_entropy", &[4, 6], -2.0, 2.0, |g, x| g.cross_entropy(x, &[0, 5, 2, 2], 0.1)),
        case("dal", &[5], 1.0, 4.0, |g, x| g.differentiable_average_lagging(x, 4)),
        case("scan_absorb", &[2, 3, 4], 0.05, 0.95, |g, x| g.monotonic_scan(x, true)),
        case("scan_spill", &[3, 5], 0.05, 0.95, |g, x| g.monotonic_scan(x, false)),
        case("cumsum_inclusive", &[3, 5], 0.1, 0.9, |g, x| Ok(g.cumulative(x, CumKind::Sum, CumMode::Inclusive))),
        case("cumsum_exclusive", &[3, 5], 0.1, 0.9, |g, x| Ok(g.cumulative(x, CumKind::Sum, CumMode::Exclusive))),
        case("cumprod_inclusive", &[3, 5], 0.1, 0.9, |g, x| Ok(g.cumulative(x, CumKind::Product, CumMode::Inclusive))),
        case("cumprod_exclusive", &[3, 5], 0.1, 0.9, |g, x| Ok(g.cumulative(x, CumKind::Product, CumMode::Exclusive))),
    ]
}
