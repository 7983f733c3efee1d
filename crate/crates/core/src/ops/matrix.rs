//! Batched matrix kernels over `(batch, 1, rows, cols)` tensors.

use crate::parallel::{for_each_chunk, Exec};

/// Dimensions of one operand as stored (before any transpose).
#[derive(Debug, Clone, Copy)]
pub struct MatDims {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

/// `C = op(A) · op(B)` for every batch item.
///
/// Each output entry is a left-to-right sum over the inner dimension.
pub fn gemm(
    a: &[f64],
    ad: MatDims,
    trans_a: bool,
    b: &[f64],
    bd: MatDims,
    trans_b: bool,
    exec: Exec,
) -> (Vec<f64>, usize, usize) {
    let (m, ka) = if trans_a {
        (ad.cols, ad.rows)
    } else {
        (ad.rows, ad.cols)
    };
    let (kb, n) = if trans_b {
        (bd.cols, bd.rows)
    } else {
        (bd.rows, bd.cols)
    };
    debug_assert_eq!(ka, kb);
    debug_assert_eq!(ad.batch, bd.batch);
    let k = ka;
    let asz = ad.rows * ad.cols;
    let bsz = bd.rows * bd.cols;
    let mut out = vec![0.0; ad.batch * m * n];
    for_each_chunk(exec, &mut out, n, |row, dst| {
        let bi = row / m;
        let i = row % m;
        let am = &a[bi * asz..(bi + 1) * asz];
        let bm = &b[bi * bsz..(bi + 1) * bsz];
        let a_at = |kk: usize| {
            if trans_a {
                am[kk * ad.cols + i]
            } else {
                am[i * ad.cols + kk]
            }
        };
        if trans_b {
            for (j, d) in dst.iter_mut().enumerate() {
                let brow = &bm[j * bd.cols..(j + 1) * bd.cols];
                let mut s = 0.0;
                for (kk, &bv) in brow.iter().enumerate().take(k) {
                    s += a_at(kk) * bv;
                }
                *d = s;
            }
        } else {
            for kk in 0..k {
                let av = a_at(kk);
                let brow = &bm[kk * bd.cols..(kk + 1) * bd.cols];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
    });
    (out, m, n)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize, exec: Exec) -> Vec<f64> {
    let mut out = x.to_vec();
    for_each_chunk(exec, &mut out, cols, |_, row| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    });
    out
}

/// Gradient of [`softmax_rows`] given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize, exec: Exec) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for_each_chunk(exec, &mut dx, cols, |r, row| {
        let yr = &y[r * cols..(r + 1) * cols];
        let dr = &dy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in row.iter_mut().zip(yr).zip(dr) {
            *d = yv * (g - dot);
        }
    });
    dx
}
