//! Raw loops behind the tape operations. Reductions accumulate in f64.

const ROW_BLOCK: usize = 4;

/// `a[m×k] · b[k×n]`. Each output element sums its products in `k` order.
pub(super) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; ROW_BLOCK * n];
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(m - i0);
        acc[..rows * n].fill(0.0);
        for kk in 0..k {
            let b_row = &b64[kk * n..(kk + 1) * n];
            for r in 0..rows {
                let aik = a[(i0 + r) * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let aik = aik as f64;
                for (slot, &bkj) in acc[r * n..(r + 1) * n].iter_mut().zip(b_row) {
                    *slot += aik * bkj;
                }
            }
        }
        for (o, &v) in out[i0 * n..(i0 + rows) * n]
            .iter_mut()
            .zip(&acc[..rows * n])
        {
            *o = v as f32;
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `[k×n]`, giving `[m×k]`.
pub(super) fn matmul_rhs_t(g: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // Transposing first keeps the inner loop a contiguous axpy.
    let mut bt = vec![0.0f32; k * n];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j];
        }
    }
    matmul(g, &bt, m, n, k)
}

/// `aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`, giving `[k×n]`.
pub(super) fn matmul_lhs_t(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let slot = &mut acc[kk * n..(kk + 1) * n];
            for (s, &gv) in slot.iter_mut().zip(g_row) {
                *s += aik * gv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(super) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn softmax(x: &[f32], shape: &[usize], axis: usize, log: bool) -> Vec<f32> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len)
                .map(|j| x[idx(j)] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|j| (x[idx(j)] as f64 - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] as f64 - lse) as f32;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = ((x[idx(j)] as f64 - max).exp() / sum) as f32;
                }
            }
        }
    }
    out
}

/// Backward of softmax given its output `y`.
pub(super) fn softmax_backward(y: &[f32], g: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| g[idx(j)] as f64 * y[idx(j)] as f64).sum();
            for j in 0..len {
                let k = idx(j);
                out[k] = (y[k] as f64 * (g[k] as f64 - dot)) as f32;
            }
        }
    }
    out
}

/// Backward of log-softmax given its output `y` (log-probabilities).
pub(super) fn log_softmax_backward(y: &[f32], g: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let gsum: f64 = (0..len).map(|j| g[idx(j)] as f64).sum();
            for j in 0..len {
                let k = idx(j);
                out[k] = (g[k] as f64 - (y[k] as f64).exp() * gsum) as f32;
            }
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Row statistics for layer norm over the last axis: (mean, 1/sqrt(var+eps)).
pub(super) fn layer_norm_stats(x: &[f32], d: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks_exact(d)
        .map(|row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Row-major strides of a contiguous shape.
pub(super) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x` with its axes reordered so that output axis `i` is input
/// axis `axes[i]`.
pub(super) fn permute(x: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(
            permute(&x, &[2, 3], &[1, 0]),
            vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn permute_rank3_roundtrip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let y = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        // inverse of [2,0,1] is [1,2,0]
        let z = permute(&y, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(x, z);
    }
}
