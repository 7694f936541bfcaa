//! Loop kernels behind the graph operations.

use crate::scalar::Scalar;

/// `c[n×m] (+)= a[n×k] · b[k×m]`, inner products accumulated in f64.
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_acc();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (dst, &bv) in acc.iter_mut().zip(brow) {
                *dst += av * bv.to_acc();
            }
        }
        let crow = &mut c[i * m..(i + 1) * m];
        if accumulate {
            for (dst, &v) in crow.iter_mut().zip(&acc) {
                *dst = S::from_acc(dst.to_acc() + v);
            }
        } else {
            for (dst, &v) in crow.iter_mut().zip(&acc) {
                *dst = S::from_acc(v);
            }
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose<S: Copy>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` takes input axis `axes[i]`.
pub(crate) fn permute<S: Copy>(src: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_swaps_leading_axes() {
        // [2,3] -> transpose
        let x = [1, 2, 3, 4, 5, 6];
        let (y, shape) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(y, vec![1, 4, 2, 5, 3, 6]);
        assert_eq!(transpose(&x, 2, 3), y);
    }

    #[test]
    fn permute_roundtrip_3d() {
        let x: Vec<i32> = (0..24).collect();
        let axes = [2, 0, 1];
        let (y, shape) = permute(&x, &[2, 3, 4], &axes);
        assert_eq!(shape, vec![4, 2, 3]);
        let (z, back) = permute(&y, &shape, &inverse_axes(&axes));
        assert_eq!(back, vec![2, 3, 4]);
        assert_eq!(z, x);
    }
}
