//! Raw slice kernels shared by the graph ops.
//!
//! Every kernel has a fixed reduction order that depends only on the
//! operands of one output element, so a row computed inside a large batch is
//! bit-identical to the same row computed alone.

/// Strided matrix operand: `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `[rows, cols]` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `out[m, n] = a[m, k] · b[k, n] (+ out if accumulate)`; `out` is row-major.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    out: &mut [f64],
    accumulate: bool,
) {
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let max_a = (m - 1) * a.row_stride + (k - 1) * a.col_stride;
    let max_b = (k - 1) * b.row_stride + (n - 1) * b.col_stride;
    assert!(max_a < a.data.len() && max_b < b.data.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of every strided access were checked above and `out`
    // holds at least m * n elements laid out row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
}

pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xr.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Row-wise layer normalisation. Writes the normalised activations into
/// `xhat` and the per-row inverse standard deviation into `inv_std`.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    let n = cols as f64;
    for (r, xr) in x.chunks_exact(cols).enumerate() {
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        let base = r * cols;
        for j in 0..cols {
            let h = (xr[j] - mean) * is;
            xhat[base + j] = h;
            out[base + j] = h * gamma[j] + beta[j];
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 13, 5);
        let a = fill(m * k, 1);
        let b = fill(k * n, 2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), &mut out, false);
        for (x, y) in out.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_rows_independent_of_batch() {
        let (m, k, n) = (37, 24, 19);
        let a = fill(m * k, 3);
        let b = fill(k * n, 4);
        let mut full = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), &mut full, false);
        for i in 0..m {
            let mut one = vec![0.0; n];
            gemm(1, k, n, MatRef::rows(&a[i * k..(i + 1) * k], k), MatRef::rows(&b, n), &mut one, false);
            assert_eq!(&full[i * n..(i + 1) * n], &one[..]);
        }
    }

    #[test]
    fn gemm_trailing_zero_terms_are_exact() {
        // Extending the reduction dimension with zero weights must not change
        // a single bit; causal masking relies on it.
        let (k, n) = (9, 16);
        let a = fill(k, 5);
        let b = fill((k + 6) * n, 6);
        let mut short = vec![0.0; n];
        gemm(1, k, n, MatRef::rows(&a, k), MatRef::rows(&b[..k * n], n), &mut short, false);
        let mut padded_a = a.clone();
        padded_a.extend(std::iter::repeat(0.0).take(6));
        let mut long = vec![0.0; n];
        gemm(1, k + 6, n, MatRef::rows(&padded_a, k + 6), MatRef::rows(&b, n), &mut long, false);
        assert_eq!(short, long);
    }

    #[test]
    fn transposed_view() {
        let a = fill(6, 7); // [2, 3]
        let b = fill(12, 8); // [4, 3]
        let mut out = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::rows(&a, 3), MatRef::transposed(&b, 3), &mut out, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stable_sigmoids() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
