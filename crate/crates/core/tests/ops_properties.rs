//! Properties of the tensor kernels, pooling and the attention block, each
//! checked against a naive recomputation.

use mono3d::align::{center_align_offsets, shape_align_offsets};
use mono3d::anab::{anab_forward, AnabParams, PyramidSpec};
use mono3d::ops::pool::{adaptive_avg_forward, bin_range, pa2_forward};
use mono3d::ops::{align_conv_forward, conv2d_forward};
use mono3d::{ConvSpec, Exec, Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bn, cin, h, wd] = x.shape().dims();
    let [cout, _, kh, kw] = w.shape().dims();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(Shape::new(bn, cout, ho, wo));
    for n in 0..bn {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_naive_loops(
        seed in any::<u64>(),
        bn in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..8, w in 1usize..8, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(bn, cin, h, w), &mut rng);
        let wt = random_tensor(Shape::new(cout, cin, k, k), &mut rng);
        let b = random_tensor(Shape::new(1, cout, 1, 1), &mut rng);
        let want = naive_conv(&x, &wt, &b, stride, pad);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = conv2d_forward(&x, &wt, &b, stride, pad, exec).unwrap();
            prop_assert_eq!(got.shape(), want.shape());
            prop_assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn integer_offsets_shift_the_input(seed in any::<u64>(), dy in -2i32..3, dx in -2i32..3) {
        // a whole-pixel offset on a 1x1 kernel reads the neighbouring pixel
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(1, 2, 5, 6), &mut rng);
        let id = ConvSpec::identity(2);
        let off = Tensor::from_fn(Shape::new(1, 2, 5, 6), |i| if i < 30 { dy as f64 } else { dx as f64 });
        let y = align_conv_forward(&x, &id.weight, &id.bias, &off, 1, 0, Exec::Sequential).unwrap();
        for c in 0..2 {
            for r in 0..5i32 {
                for q in 0..6i32 {
                    let (sy, sx) = (r + dy, q + dx);
                    let want = if (0..5).contains(&sy) && (0..6).contains(&sx) {
                        x.at(0, c, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    prop_assert_eq!(y.at(0, c, r as usize, q as usize), want);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..40, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(Shape::matrix(1, rows, cols), |_| scale * rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let v = g.constant(x);
        let p = g.softmax(v);
        let out = g.value(p);
        for r in 0..rows {
            let s: f64 = (0..cols).map(|c| out.at(0, 0, r, c)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..cols).all(|c| out.at(0, 0, r, c) >= 0.0));
        }
    }

    #[test]
    fn shape_offsets_are_antisymmetric_and_linear(ha in 1.0f64..300.0, wa in 1.0f64..300.0, k in 1usize..6) {
        let f = shape_align_offsets(&[(ha, wa)], 1, 1, 8, (k, k)).unwrap();
        let f2 = shape_align_offsets(&[(2.0 * ha + 8.0 * k as f64, wa)], 1, 1, 8, (k, k)).unwrap();
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = f.get(0, 0, i * k + j);
                let (my, mx) = f.get(0, 0, (k - 1 - i) * k + (k - 1 - j));
                prop_assert!((dy + my).abs() < 1e-12 && (dx + mx).abs() < 1e-12);
                // (2h + S·k)/(S·k) − 1 = 2·(h/(S·k) − 1) + 2, so the row offset
                // grows by 2·dy + 2·(i − k/2 + 0.5)
                let lever = i as f64 - k as f64 / 2.0 + 0.5;
                prop_assert!((f2.get(0, 0, i * k + j).0 - (2.0 * dy + 2.0 * lever)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn center_offsets_scale_inversely_with_stride(xr in -40.0f64..40.0, yr in -40.0f64..40.0, s in 1usize..17) {
        let f = center_align_offsets(&[(xr, yr)], 1, 1, s, 9).unwrap();
        for t in 0..9 {
            let (dy, dx) = f.get(0, 0, t);
            prop_assert!((dy * s as f64 - yr).abs() < 1e-12);
            prop_assert!((dx * s as f64 - xr).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_attention_pooling_is_average_pooling(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, a in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, 3, h, w);
        let x = random_tensor(s, &mut rng);
        let attn = vec![a; 2 * h * w];
        let levels = [(1, 1), (2, 2), (3, 2)];
        let (pooled, _) = pa2_forward(x.data(), s, &attn, &levels, 0.0, Exec::Sequential);
        let l: usize = levels.iter().map(|(p, q)| p * q).sum();
        let mut row = 0;
        for &bins in &levels {
            let avg = adaptive_avg_forward(x.data(), s, bins, Exec::Sequential);
            let nb = bins.0 * bins.1;
            for b in 0..2 {
                for bin in 0..nb {
                    for c in 0..3 {
                        let want = avg[((b * 3 + c) * nb) + bin];
                        let got = pooled[(b * l + row + bin) * 3 + c];
                        prop_assert!((got - want).abs() < 1e-12, "level {:?} bin {} got {} want {}", bins, bin, got, want);
                    }
                }
            }
            row += nb;
        }
    }

    #[test]
    fn permuting_pixels_within_a_bin_keeps_its_descriptor(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (6usize, 8usize);
        let s = Shape::new(1, 2, h, w);
        let x = random_tensor(s, &mut rng);
        let attn: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.05..1.0)).collect();
        let levels = [(2usize, 2usize)];
        // bin (1, 0) of the 2x2 level
        let (y0, y1) = bin_range(1, 2, h);
        let (x0, x1) = bin_range(0, 2, w);
        let cells: Vec<(usize, usize)> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).collect();
        let mut perm: Vec<usize> = (0..cells.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut xp = x.clone();
        let mut ap = attn.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = cells[dst];
            let (sy, sx) = cells[src];
            for c in 0..2 {
                xp.set(0, c, dy, dx, x.at(0, c, sy, sx));
            }
            ap[dy * w + dx] = attn[sy * w + sx];
        }
        let (p0, _) = pa2_forward(x.data(), s, &attn, &levels, 1e-6, Exec::Sequential);
        let (p1, _) = pa2_forward(xp.data(), s, &ap, &levels, 1e-6, Exec::Sequential);
        for c in 0..2 {
            prop_assert!((p0[2 * 2 + c] - p1[2 * 2 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn row_constant_similarity_shift_leaves_output_unchanged(seed in any::<u64>(), shift in -3.0f64..3.0) {
        // a key-bias shift b adds Q_i·b to every entry of row i
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = PyramidSpec::new(vec![(1, 1), (2, 2), (3, 3)], 0.0).unwrap();
        let p = AnabParams::random(4, spec, &mut rng).unwrap();
        let x = random_tensor(Shape::new(1, 4, 6, 7), &mut rng);
        let mut q = p.clone();
        for v in q.key.bias.data_mut() {
            *v += shift * rng.random_range(0.5..1.5);
        }
        let a = anab_forward(&x, &p).unwrap();
        let b = anab_forward(&x, &q).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }
}

#[test]
fn sequential_and_parallel_kernels_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(Shape::new(3, 5, 17, 23), &mut rng);
    let w = random_tensor(Shape::new(6, 5, 3, 3), &mut rng);
    let b = random_tensor(Shape::new(1, 6, 1, 1), &mut rng);
    let off = Tensor::from_fn(Shape::new(3, 18, 17, 23), |_| rng.random_range(-2.0..2.0));
    let c1 = conv2d_forward(&x, &w, &b, 1, 1, Exec::Sequential).unwrap();
    let c2 = conv2d_forward(&x, &w, &b, 1, 1, Exec::Parallel).unwrap();
    assert_eq!(c1, c2);
    let a1 = align_conv_forward(&x, &w, &b, &off, 1, 1, Exec::Sequential).unwrap();
    let a2 = align_conv_forward(&x, &w, &b, &off, 1, 1, Exec::Parallel).unwrap();
    assert_eq!(a1, a2);

    let p = AnabParams::random(5, PyramidSpec::square(&[1, 2, 4]).unwrap(), &mut rng).unwrap();
    let run = |exec| {
        let mut g = Graph::with_exec(exec);
        let bound = p.bind(&mut g, true).unwrap();
        let xv = g.leaf(x.clone());
        let out = bound.forward(&mut g, xv).unwrap();
        let s = g.sum(out.out);
        g.backward(s).unwrap();
        (g.value(out.out).clone(), g.grad(xv).unwrap().to_vec())
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}
