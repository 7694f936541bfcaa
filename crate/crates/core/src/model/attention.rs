use super::ensure_2d;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// `[n, H·d_k] -> [H, n, d_k]`.
pub fn split_heads<S: Scalar>(g: &mut Graph<S>, x: Var, heads: usize) -> Result<Var> {
    let (n, d) = ensure_2d(g, x, "split_heads input")?;
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(format!("cannot split width {d} into {heads} heads")));
    }
    let r = g.reshape(x, &[n, heads, d / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// `[H, n, d_k] -> [n, H·d_k]`.
pub fn merge_heads<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let (h, n, dk) = match g.shape(x) {
        [h, n, dk] => (*h, *n, *dk),
        other => return Err(shape_err(format!("merge_heads expects [H, n, d_k], got {other:?}"))),
    };
    let p = g.permute(x, &[1, 0, 2])?;
    g.reshape(p, &[n, h * dk])
}

/// Multihead scaled dot-product attention.
///
/// `q_in` is `[n, d]`, `kv_in` is `[m, d]`, projections are `[d, d]`, and the
/// optional additive `mask` is `[n, m]` (use `-inf` to hide a position).
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention_on<S: Scalar>(
    g: &mut Graph<S>,
    q_in: Var,
    kv_in: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (n, d) = ensure_2d(g, q_in, "query")?;
    let (m, _) = ensure_2d(g, kv_in, "keys")?;
    if let Some(mk) = mask {
        if g.shape(mk) != [n, m] {
            return Err(shape_err(format!("mask shape {:?} does not match scores [{n}, {m}]", g.shape(mk))));
        }
    }
    let q = g.matmul(q_in, wq)?;
    let q = split_heads(g, q, heads)?;
    let k = g.matmul(kv_in, wk)?;
    let k = split_heads(g, k, heads)?;
    let v = g.matmul(kv_in, wv)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, S::from_acc(1.0 / ((d / heads) as f64).sqrt()));
    if let Some(mk) = mask {
        scores = g.add(scores, mk)?;
    }
    let w = g.softmax_lastdim(scores)?;
    let ctx = g.matmul(w, v)?;
    let ctx = merge_heads(g, ctx)?;
    g.matmul(ctx, wo)
}
