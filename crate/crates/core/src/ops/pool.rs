//! Adaptive average pooling and the attention-weighted pyramid pooling used
//! for the key/value branches of the asymmetric attention block.

use crate::parallel::{for_each_chunk, map_range, Exec};
use crate::tensor::Shape;

/// Half-open index range covered by bin `p` of `n` over `size` cells.
#[inline]
pub fn bin_range(p: usize, n: usize, size: usize) -> (usize, usize) {
    (p * size / n, (p + 1) * size / n)
}

/// Adaptive average pooling to `bins = (rows, cols)`. Empty bins yield 0.
pub fn adaptive_avg_forward(x: &[f64], s: Shape, bins: (usize, usize), exec: Exec) -> Vec<f64> {
    let (nh, nw) = bins;
    let mut out = vec![0.0; s.batch * s.channels * nh * nw];
    for_each_chunk(exec, &mut out, nh * nw, |bc, dst| {
        let plane = &x[bc * s.plane()..(bc + 1) * s.plane()];
        for p in 0..nh {
            let (y0, y1) = bin_range(p, nh, s.height);
            for q in 0..nw {
                let (x0, x1) = bin_range(q, nw, s.width);
                let n = (y1 - y0) * (x1 - x0);
                if n == 0 {
                    continue;
                }
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += plane[y * s.width + xx];
                    }
                }
                dst[p * nw + q] = acc / n as f64;
            }
        }
    });
    out
}

pub fn adaptive_avg_backward(g: &[f64], s: Shape, bins: (usize, usize), exec: Exec) -> Vec<f64> {
    let (nh, nw) = bins;
    let mut gx = vec![0.0; s.numel()];
    for_each_chunk(exec, &mut gx, s.plane(), |bc, plane| {
        let gb = &g[bc * nh * nw..(bc + 1) * nh * nw];
        for p in 0..nh {
            let (y0, y1) = bin_range(p, nh, s.height);
            for q in 0..nw {
                let (x0, x1) = bin_range(q, nw, s.width);
                let n = (y1 - y0) * (x1 - x0);
                if n == 0 {
                    continue;
                }
                let d = gb[p * nw + q] / n as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        plane[y * s.width + xx] += d;
                    }
                }
            }
        }
    });
    gx
}

/// Total descriptor count `Σ rows·cols` over pyramid levels.
pub fn pyramid_len(levels: &[(usize, usize)]) -> usize {
    levels.iter().map(|&(a, b)| a * b).sum()
}

/// Visits bins in level order, then row-major within a level.
fn for_each_bin(
    levels: &[(usize, usize)],
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, (usize, usize), (usize, usize)),
) {
    let mut row = 0;
    for &(nh, nw) in levels {
        for p in 0..nh {
            let ys = bin_range(p, nh, h);
            for q in 0..nw {
                f(row, ys, bin_range(q, nw, w));
                row += 1;
            }
        }
    }
}

/// Attention-weighted pyramid pooling.
///
/// `features` is `(B, C, H, W)`, `attn` is `(B, 1, H, W)`. Returns the
/// `(B, 1, L, C)` descriptor matrix and the per-row denominators
/// `Σ a + eps`, both needed for the backward pass.
pub fn pa2_forward(
    features: &[f64],
    s: Shape,
    attn: &[f64],
    levels: &[(usize, usize)],
    eps: f64,
    exec: Exec,
) -> (Vec<f64>, Vec<f64>) {
    let l = pyramid_len(levels);
    let c = s.channels;
    let hw = s.plane();
    let per_batch = map_range(exec, s.batch, |b| {
        let a = &attn[b * hw..(b + 1) * hw];
        let f = &features[b * c * hw..(b + 1) * c * hw];
        let mut out = vec![0.0; l * c];
        let mut den = vec![0.0; l];
        for_each_bin(levels, s.height, s.width, |row, (y0, y1), (x0, x1)| {
            let mut sa = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sa += a[y * s.width + x];
                }
            }
            let d = sa + eps;
            den[row] = d;
            for ch in 0..c {
                let plane = &f[ch * hw..(ch + 1) * hw];
                let mut num = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        num += a[y * s.width + x] * plane[y * s.width + x];
                    }
                }
                out[row * c + ch] = if d == 0.0 { 0.0 } else { num / d };
            }
        });
        (out, den)
    });
    let mut out = Vec::with_capacity(s.batch * l * c);
    let mut den = Vec::with_capacity(s.batch * l);
    for (o, d) in per_batch {
        out.extend(o);
        den.extend(d);
    }
    (out, den)
}

/// Gradients of [`pa2_forward`] with respect to features and attention.
#[allow(clippy::too_many_arguments)]
pub fn pa2_backward(
    g: &[f64],
    features: &[f64],
    s: Shape,
    attn: &[f64],
    out: &[f64],
    den: &[f64],
    levels: &[(usize, usize)],
    exec: Exec,
) -> (Vec<f64>, Vec<f64>) {
    let l = pyramid_len(levels);
    let c = s.channels;
    let hw = s.plane();
    let per_batch = map_range(exec, s.batch, |b| {
        let a = &attn[b * hw..(b + 1) * hw];
        let f = &features[b * c * hw..(b + 1) * c * hw];
        let gb = &g[b * l * c..(b + 1) * l * c];
        let ob = &out[b * l * c..(b + 1) * l * c];
        let db = &den[b * l..(b + 1) * l];
        let mut gf = vec![0.0; c * hw];
        let mut ga = vec![0.0; hw];
        for_each_bin(levels, s.height, s.width, |row, (y0, y1), (x0, x1)| {
            let d = db[row];
            if d == 0.0 {
                return;
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * s.width + x;
                    let mut acc_a = 0.0;
                    for ch in 0..c {
                        let gv = gb[row * c + ch];
                        gf[ch * hw + pix] += gv * a[pix] / d;
                        acc_a += gv * (f[ch * hw + pix] - ob[row * c + ch]);
                    }
                    ga[pix] += acc_a / d;
                }
            }
        });
        (gf, ga)
    });
    let mut gf = Vec::with_capacity(features.len());
    let mut ga = Vec::with_capacity(attn.len());
    for (f, a) in per_batch {
        gf.extend(f);
        ga.extend(a);
    }
    (gf, ga)
}
