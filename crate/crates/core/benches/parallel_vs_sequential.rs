//! Rayon kernels against their sequential twins. Build with
//! `--no-default-features` to see `parallel` fall back to one thread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mono3d::anab::{AnabParams, PyramidSpec};
use mono3d::geometry::{iou_bev_many, Box3D};
use mono3d::ops::{align_conv_forward, conv2d_forward};
use mono3d::{Exec, Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(Shape::new(2, 16, 48, 160), &mut rng);
    let w = random(Shape::new(16, 16, 3, 3), &mut rng);
    let b = random(Shape::new(1, 16, 1, 1), &mut rng);
    let off = Tensor::from_fn(Shape::new(2, 18, 48, 160), |_| rng.random_range(-1.5..1.5));

    let mut g = c.benchmark_group("conv2d_3x3_16ch_48x160");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bn| {
            bn.iter(|| conv2d_forward(black_box(&x), &w, &b, 1, 1, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("align_conv_3x3_16ch_48x160");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bn| {
            bn.iter(|| align_conv_forward(black_box(&x), &w, &b, &off, 1, 1, exec).unwrap())
        });
    }
    g.finish();

    let p = AnabParams::random(16, PyramidSpec::square(&[1, 4, 8, 16]).unwrap(), &mut rng).unwrap();
    let mut g = c.benchmark_group("anab_forward_16ch_48x160");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bn| {
            bn.iter(|| {
                let mut graph = Graph::with_exec(exec);
                let bound = p.bind(&mut graph, false).unwrap();
                let xv = graph.constant(black_box(x.clone()));
                let out = bound.forward(&mut graph, xv).unwrap();
                graph.take_value(out.out)
            })
        });
    }
    g.finish();

    let pairs: Vec<(Box3D, Box3D)> = (0..20_000)
        .map(|_| {
            let mut bx = || {
                Box3D::new(
                    [
                        rng.random_range(-2.0..2.0),
                        1.6,
                        rng.random_range(18.0..22.0),
                    ],
                    [rng.random_range(1.4..2.0), 1.5, rng.random_range(3.0..5.0)],
                    rng.random_range(-3.1..3.1),
                )
                .unwrap()
            };
            (bx(), bx())
        })
        .collect();
    let mut g = c.benchmark_group("iou_bev_20k_pairs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bn| {
            bn.iter(|| iou_bev_many(black_box(&pairs), exec))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
