//! Central finite-difference check of tape gradients.
//!
//! The error for one element is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`,
//! i.e. relative for gradients above `floor` and absolute below it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anab::{attention_map, AnabParams, PyramidSpec};
use crate::error::Result;
use crate::graph::{CenterPick, Graph, Var};
use crate::nn::{BoundConv, ConvSpec};
use crate::parallel::Exec;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many evenly strided elements per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    /// Set when the function produced a non-finite value anywhere.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.non_finite {
            return write!(f, "{:<16} FAIL non-finite value", self.op);
        }
        write!(
            f,
            "{:<16} {} max_rel_err={:.3e} (tol {:.0e}, {} elements)",
            self.op,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.checked
        )
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_exec(Exec::Sequential);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences.
pub fn grad_check<F>(
    op: &str,
    f: F,
    inputs: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_exec(Exec::Sequential);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol: cfg.tol,
        non_finite: false,
    };
    if !g.value(out).item().is_finite() {
        report.non_finite = true;
        return Ok(report);
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match cfg.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = t.data()[e];
            probe[k].data_mut()[e] = orig + cfg.step;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[e] = orig - cfg.step;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = true;
                return Ok(report);
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[k][e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((k, e));
            }
        }
    }
    Ok(report)
}

/// Fixed-weight projection of any node to a scalar, so every output element
/// contributes a distinct amount.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.shape(y).numel();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    g.weighted_sum(y, &w)
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Sampling offsets whose fractional part stays in `[0.15, 0.85]`, so a
/// probe of size `step` never crosses a bilinear cell boundary.
fn smooth_offsets(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        rng.random_range(-2i32..2) as f64 + rng.random_range(0.15..0.85)
    })
}

/// Checks every differentiable operation used by the detector on small
/// seeded inputs placed away from kinks.
pub fn standard_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = uniform(Shape::new(2, 3, 5, 6), -1.0, 1.0, &mut rng);
    let w = uniform(Shape::new(4, 3, 3, 3), -0.5, 0.5, &mut rng);
    let b = uniform(Shape::new(1, 4, 1, 1), -0.5, 0.5, &mut rng);
    out.push(grad_check(
        "conv2d",
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            project(g, y)
        },
        &[x.clone(), w.clone(), b.clone()],
        cfg,
    )?);
    out.push(grad_check(
        "conv2d/stride2",
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(g, y)
        },
        &[x.clone(), w.clone(), b.clone()],
        cfg,
    )?);

    // bilinear resampling alone: identity 1x1 kernel, gradient w.r.t. image and offsets
    let off1 = smooth_offsets(Shape::new(2, 2, 5, 6), &mut rng);
    out.push(grad_check(
        "bilinear_sample",
        |g, v| {
            let id = ConvSpec::identity(3);
            let wv = g.constant(id.weight);
            let bv = g.constant(id.bias);
            let y = g.align_conv(v[0], wv, bv, v[1], 1, 0)?;
            project(g, y)
        },
        &[x.clone(), off1],
        cfg,
    )?);

    let off9 = smooth_offsets(Shape::new(2, 18, 5, 6), &mut rng);
    out.push(grad_check(
        "align_conv",
        |g, v| {
            let y = g.align_conv(v[0], v[1], v[2], v[3], 1, 1)?;
            project(g, y)
        },
        &[x.clone(), w, b, off9],
        cfg,
    )?);

    let head = Tensor::from_fn(Shape::new(2, 4, 5, 6), |_| {
        rng.random_range(-1i32..1) as f64 + rng.random_range(0.15..0.85)
    });
    let picks: Vec<CenterPick> = (0..60)
        .map(|i| CenterPick {
            channel_x: 2 * (i % 2),
            channel_y: 2 * (i % 2) + 1,
            scale_x: 1.0,
            scale_y: 1.0,
        })
        .collect();
    out.push(grad_check(
        "center_offsets",
        |g, v| {
            let o = g.center_offsets(v[1], picks.clone(), 1)?;
            let id = ConvSpec::identity(3);
            let wv = g.constant(id.weight);
            let bv = g.constant(id.bias);
            let y = g.align_conv(v[0], wv, bv, o, 1, 0)?;
            project(g, y)
        },
        &[x.clone(), head],
        cfg,
    )?);

    let wa = uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, &mut rng);
    let ba = uniform(Shape::new(1, 1, 1, 1), -0.5, 0.5, &mut rng);
    out.push(grad_check(
        "attention_map",
        |g, v| {
            let conv = BoundConv {
                weight: v[1],
                bias: v[2],
                stride: 1,
                padding: 0,
            };
            let a = attention_map(g, v[0], &conv)?;
            project(g, a)
        },
        &[x.clone(), wa, ba],
        cfg,
    )?);

    let feats = uniform(Shape::new(2, 3, 6, 7), -1.0, 1.0, &mut rng);
    let attn = uniform(Shape::new(2, 1, 6, 7), 0.1, 0.9, &mut rng);
    out.push(grad_check(
        "pa2_pool",
        |g, v| {
            let y = g.pa2_pool(v[0], v[1], &[(1, 1), (2, 2), (3, 4)], 1e-6)?;
            project(g, y)
        },
        &[feats, attn],
        cfg,
    )?);

    let params = AnabParams::random(8, PyramidSpec::square(&[1, 2, 3])?, &mut rng)?;
    let xa = uniform(Shape::new(1, 8, 6, 10), -1.0, 1.0, &mut rng);
    let mut inputs = vec![xa];
    inputs.extend(params.tensors().into_iter().cloned());
    out.push(grad_check(
        "anab_forward",
        |g, v| {
            let bound = params.bind_vars(&v[1..])?;
            let y = bound.forward(g, v[0])?;
            project(g, y.out)
        },
        &inputs,
        cfg,
    )?);

    let logits = uniform(Shape::matrix(1, 6, 3), -2.0, 2.0, &mut rng);
    out.push(grad_check(
        "loss_cls",
        |g, v| g.cross_entropy(v[0], vec![0, 2, 1, 0, 0, 2]),
        &[logits],
        cfg,
    )?);

    // predicted corners around fixed targets, partially overlapping
    let gt: Vec<[f64; 4]> = vec![
        [0.0, 0.0, 4.0, 3.0],
        [2.0, 1.0, 7.0, 6.0],
        [-1.0, -2.0, 1.5, 2.5],
    ];
    let pred = Tensor::from_fn(Shape::matrix(1, 3, 4), |i| {
        gt[i / 4][i % 4] + rng.random_range(-0.8..0.8)
    });
    out.push(grad_check(
        "loss_2d",
        |g, v| g.neg_log_iou(v[0], gt.clone()),
        &[pred],
        cfg,
    )?);
    let anchors: Vec<[f64; 4]> = vec![
        [2.0, 1.5, 4.0, 3.0],
        [4.5, 3.5, 5.0, 5.0],
        [0.0, 0.0, 2.5, 4.5],
    ];
    let deltas = uniform(Shape::matrix(1, 3, 4), -0.2, 0.2, &mut rng);
    out.push(grad_check(
        "decode_2d+iou",
        |g, v| {
            let boxes = g.decode_2d(v[0], anchors.clone())?;
            g.neg_log_iou(boxes, gt.clone())
        },
        &[deltas],
        cfg,
    )?);

    // residuals kept off the |r| = 1 switch point
    let target: Vec<f64> = (0..14).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pred3 = Tensor::from_fn(Shape::matrix(1, 2, 7), |i| {
        let r = if i % 2 == 0 {
            rng.random_range(-0.8..0.8)
        } else {
            rng.random_range(1.2..2.5)
        };
        target[i] + r
    });
    out.push(grad_check(
        "loss_3d",
        |g, v| g.smooth_l1(v[0], target.clone()),
        &[pred3],
        cfg,
    )?);
    Ok(out)
}
