//! Asymmetric non-local attention block.
//!
//! The query keeps full resolution (`N = H·W` rows) while key and value are
//! reduced to `L` descriptors by attention-weighted pyramid pooling, so the
//! similarity matrix is `N × L` instead of `N × N`:
//!
//! ```text
//! M_S   = M_Q · M_Kᵀ                (N×C · C×L)
//! M_out = softmax_rows(M_S) · M_V   (N×L · L×C)
//! out   = x + W_out ∗ reshape(M_out)
//! ```

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BoundConv, ConvSpec};
use crate::ops::{conv2d_forward, matrix};
use crate::parallel::Exec;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSpec {
    /// `(rows, cols)` bin counts per level, in ascending size.
    pub levels: Vec<(usize, usize)>,
    /// Added to the attention mass of each bin before dividing.
    pub epsilon: f64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self::square(&[1, 4, 8, 16]).expect("valid default")
    }
}

impl PyramidSpec {
    /// Levels of `n × n` bins.
    pub fn square(levels: &[usize]) -> Result<Self> {
        Self::new(levels.iter().map(|&n| (n, n)).collect(), DEFAULT_EPSILON)
    }

    pub fn new(levels: Vec<(usize, usize)>, epsilon: f64) -> Result<Self> {
        const OP: &str = "PyramidSpec";
        if levels.is_empty() {
            return Err(arg_err(OP, "at least one level required"));
        }
        if levels.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(arg_err(OP, "bin counts must be positive"));
        }
        if levels
            .windows(2)
            .any(|w| w[0].0 * w[0].1 >= w[1].0 * w[1].1)
        {
            return Err(arg_err(OP, "levels must be strictly increasing"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(arg_err(OP, "epsilon must be finite and non-negative"));
        }
        Ok(Self { levels, epsilon })
    }

    /// A single level with one bin per pixel.
    pub fn full_resolution(height: usize, width: usize, epsilon: f64) -> Result<Self> {
        Self::new(vec![(height, width)], epsilon)
    }

    /// Number of pooled descriptors `L`.
    pub fn len(&self) -> usize {
        crate::ops::pool::pyramid_len(&self.levels)
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Which branches the spatial attention map weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionSharing {
    /// Key and value are both pooled with the attention map.
    #[default]
    KeyValue,
    /// Query is scaled by the map and the key is pooled with it; the value
    /// is pooled uniformly.
    QueryKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnabParams {
    pub query: ConvSpec,
    pub key: ConvSpec,
    pub value: ConvSpec,
    /// `1×1`, `C → 1`.
    pub attention: ConvSpec,
    pub output: ConvSpec,
    pub pyramid: PyramidSpec,
    pub sharing: AttentionSharing,
}

impl AnabParams {
    pub fn random<R: rand::Rng>(
        channels: usize,
        pyramid: PyramidSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut c1 = |out| ConvSpec::random(channels, out, (1, 1), 1, 0, 1.0, rng);
        Ok(Self {
            query: c1(channels)?,
            key: c1(channels)?,
            value: c1(channels)?,
            attention: c1(1)?,
            output: c1(channels)?,
            pyramid,
            sharing: AttentionSharing::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.query.in_channels()
    }

    fn convs(&self) -> [&ConvSpec; 5] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.attention,
            &self.output,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(10);
        for c in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attention,
            &mut self.output,
        ] {
            v.extend(c.params_mut());
        }
        v
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (i, conv) in self.convs().iter().enumerate() {
            if conv.kernel() != (1, 1) || conv.in_channels() != c {
                return Err(shape_err(
                    "anab",
                    format!("projection {i} must be 1x1 from {c} channels"),
                ));
            }
        }
        if self.attention.out_channels() != 1 {
            return Err(shape_err(
                "anab",
                "attention projection must have one output channel",
            ));
        }
        if [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .any(|p| p.out_channels() != c)
        {
            return Err(shape_err("anab", "embeddings must keep the channel count"));
        }
        Ok(())
    }

    /// Tensors in the order [`bind_vars`](Self::bind_vars) expects.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.convs()
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    /// Builds the bound block from ten already-registered variables
    /// (weight, bias) for query, key, value, attention and output.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundAnab> {
        self.validate()?;
        if vars.len() != 10 {
            return Err(arg_err(
                "AnabParams::bind_vars",
                format!("expected 10 variables, got {}", vars.len()),
            ));
        }
        let bc = |i: usize| BoundConv {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
            stride: 1,
            padding: 0,
        };
        Ok(BoundAnab {
            query: bc(0),
            key: bc(1),
            value: bc(2),
            attention: bc(3),
            output: bc(4),
            pyramid: self.pyramid.clone(),
            sharing: self.sharing,
            channels: self.channels(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundAnab> {
        self.validate()?;
        Ok(BoundAnab {
            query: self.query.bind(g, trainable),
            key: self.key.bind(g, trainable),
            value: self.value.bind(g, trainable),
            attention: self.attention.bind(g, trainable),
            output: self.output.bind(g, trainable),
            pyramid: self.pyramid.clone(),
            sharing: self.sharing,
            channels: self.channels(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundAnab {
    pub query: BoundConv,
    pub key: BoundConv,
    pub value: BoundConv,
    pub attention: BoundConv,
    pub output: BoundConv,
    pub pyramid: PyramidSpec,
    pub sharing: AttentionSharing,
    channels: usize,
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AnabOutput {
    pub out: Var,
    /// `(B, 1, H, W)` map in `(0, 1)`.
    pub attention: Var,
    /// `(B, 1, N, L)` similarity matrix before the softmax.
    pub similarity: Var,
    /// `(B, 1, L, C)` pooled keys.
    pub keys: Var,
}

impl BoundAnab {
    pub fn vars(&self) -> Vec<Var> {
        [
            self.query,
            self.key,
            self.value,
            self.attention,
            self.output,
        ]
        .iter()
        .flat_map(|c| c.vars())
        .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<AnabOutput> {
        let s = g.shape(x);
        if s.channels != self.channels {
            return Err(shape_err(
                "anab_forward",
                format!(
                    "input has {} channels, block expects {}",
                    s.channels, self.channels
                ),
            ));
        }
        let attn = attention_map(g, x, &self.attention)?;
        let levels = &self.pyramid.levels;
        let eps = self.pyramid.epsilon;

        let q = self.query.apply(g, x)?;
        let k = self.key.apply(g, x)?;
        let v = self.value.apply(g, x)?;
        let (q, vk_attn) = match self.sharing {
            AttentionSharing::KeyValue => (q, None),
            AttentionSharing::QueryKey => {
                let ones = g.constant(Tensor::full(g.shape(attn), 1.0));
                let tiled = tile_channels(g, attn, s.channels)?;
                (g.mul(q, tiled)?, Some(ones))
            }
        };
        let mq = g.to_rows(q);
        let mk = g.pa2_pool(k, attn, levels, eps)?;
        let mv = g.pa2_pool(v, vk_attn.unwrap_or(attn), levels, eps)?;
        let sim = g.matmul(mq, mk, true)?;
        let p = g.softmax(sim);
        let mo = g.matmul(p, mv, false)?;
        let o = g.from_rows(mo, s.height, s.width)?;
        let proj = self.output.apply(g, o)?;
        let out = g.add(proj, x)?;
        Ok(AnabOutput {
            out,
            attention: attn,
            similarity: sim,
            keys: mk,
        })
    }
}

/// Repeats a one-channel map over `c` channels via a `1×1` convolution of ones.
fn tile_channels(g: &mut Graph, a: Var, c: usize) -> Result<Var> {
    let w = g.constant(Tensor::full(Shape::new(c, 1, 1, 1), 1.0));
    let b = g.constant(Tensor::zeros(Shape::new(1, c, 1, 1)));
    g.conv2d(a, w, b, 1, 0)
}

/// Sigmoid of a `1×1`, one-output-channel convolution.
pub fn attention_map(g: &mut Graph, x: Var, conv: &BoundConv) -> Result<Var> {
    if g.shape(conv.weight).batch != 1 {
        return Err(shape_err(
            "attention_map",
            "projection must have one output channel",
        ));
    }
    let logits = conv.apply(g, x)?;
    Ok(g.sigmoid(logits))
}

/// Runs one forward pass on a fresh sequential graph.
pub fn anab_forward(x: &Tensor, params: &AnabParams) -> Result<Tensor> {
    let mut g = Graph::with_exec(Exec::Sequential);
    let b = params.bind(&mut g, false)?;
    let xv = g.constant(x.clone());
    let out = b.forward(&mut g, xv)?;
    Ok(g.take_value(out.out))
}

/// Standard embedded-Gaussian non-local block with the same projections,
/// written as plain loops over full-resolution keys. Used as the oracle for
/// the pooled block and as the quadratic baseline in the benchmark.
///
/// Similarity rows are produced one at a time, so memory stays `O(N·C)`.
pub fn reference_non_local(x: &Tensor, params: &AnabParams) -> Result<Tensor> {
    params.validate()?;
    let s = x.shape();
    let ex = Exec::Sequential;
    let q = conv2d_forward(x, &params.query.weight, &params.query.bias, 1, 0, ex)?;
    let k = conv2d_forward(x, &params.key.weight, &params.key.bias, 1, 0, ex)?;
    let v = conv2d_forward(x, &params.value.weight, &params.value.bias, 1, 0, ex)?;
    let n = s.plane();
    let c = s.channels;
    let mut y = Tensor::zeros(s);
    let mut row = vec![0.0; n];
    for b in 0..s.batch {
        for i in 0..n {
            let (iy, ix) = (i / s.width, i % s.width);
            for (j, r) in row.iter_mut().enumerate() {
                let (jy, jx) = (j / s.width, j % s.width);
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += q.at(b, ch, iy, ix) * k.at(b, ch, jy, jx);
                }
                *r = dot;
            }
            let p = matrix::softmax_rows(&row, n, ex);
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, pj) in p.iter().enumerate() {
                    acc += pj * v.at(b, ch, j / s.width, j % s.width);
                }
                y.set(b, ch, iy, ix, acc);
            }
        }
    }
    let mut out = conv2d_forward(&y, &params.output.weight, &params.output.bias, 1, 0, ex)?;
    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o += xv;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Median seconds per pooled-attention forward pass.
    pub anab_secs: f64,
    /// Median seconds per reference non-local forward pass.
    pub nonlocal_secs: f64,
    pub l: usize,
    pub n: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_it(mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64()
}

/// Single-threaded wall time of both blocks on random `1×C×H×W` input,
/// median of `runs`. Set `include_nonlocal = false` to skip the quadratic
/// baseline on large maps.
pub fn complexity_bench(
    height: usize,
    width: usize,
    channels: usize,
    spec: &PyramidSpec,
    runs: usize,
    include_nonlocal: bool,
) -> Result<BenchRow> {
    if runs == 0 {
        return Err(arg_err("complexity_bench", "runs must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let params = AnabParams::random(channels, spec.clone(), &mut rng)?;
    let x = Tensor::from_fn(Shape::new(1, channels, height, width), |i| {
        ((i * 7919) % 1000) as f64 / 500.0 - 1.0
    });

    let mut anab = Vec::with_capacity(runs);
    for _ in 0..runs {
        anab.push(time_it(|| {
            anab_forward(&x, &params).expect("anab");
        }));
    }
    let nonlocal_secs = if include_nonlocal {
        let mut nl = Vec::with_capacity(runs);
        for _ in 0..runs {
            nl.push(time_it(|| {
                reference_non_local(&x, &params).expect("non-local");
            }));
        }
        median(nl)
    } else {
        f64::NAN
    };
    Ok(BenchRow {
        height,
        width,
        channels,
        anab_secs: median(anab),
        nonlocal_secs,
        l: spec.len(),
        n: height * width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(c: usize, seed: u64) -> AnabParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AnabParams::random(c, PyramidSpec::square(&[1, 2]).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn pyramid_validation() {
        assert!(PyramidSpec::square(&[]).is_err());
        assert!(PyramidSpec::square(&[4, 2]).is_err());
        assert!(PyramidSpec::square(&[2, 2]).is_err());
        assert!(PyramidSpec::square(&[0, 2]).is_err());
        assert_eq!(PyramidSpec::default().len(), 337);
    }

    #[test]
    fn zero_attention_projection_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(Shape::new(1, 3, 4, 5), |i| i as f64));
        let conv = ConvSpec::zeros(3, 1, (1, 1), 1, 0)
            .unwrap()
            .bind(&mut g, false);
        let a = attention_map(&mut g, x, &conv).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_attention_projection() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(Shape::new(1, 3, 4, 5), |i| i as f64 * 0.01));
        let mut spec = ConvSpec::zeros(3, 1, (1, 1), 1, 0).unwrap();
        spec.bias.data_mut()[0] = 30.0;
        let conv = spec.bind(&mut g, false);
        let a = attention_map(&mut g, x, &conv).unwrap();
        assert!(g.value(a).data().iter().all(|&v| (1.0 - v) < 1e-6));
    }

    #[test]
    fn output_shape_and_finite() {
        let p = small_params(4, 1);
        let x = Tensor::from_fn(Shape::new(2, 4, 6, 7), |i| (i as f64 * 0.37).sin());
        let y = anab_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let p = small_params(4, 1);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(anab_forward(&x, &p).is_err());
    }

    #[test]
    fn query_key_sharing_runs() {
        let mut p = small_params(3, 2);
        p.sharing = AttentionSharing::QueryKey;
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| (i as f64).cos());
        let y = anab_forward(&x, &p).unwrap();
        assert!(y.is_finite());
        p.sharing = AttentionSharing::KeyValue;
        let y2 = anab_forward(&x, &p).unwrap();
        assert!(y.max_abs_diff(&y2) > 0.0);
    }

    #[test]
    fn uniform_similarity_averages_values() {
        // zero query projection makes every similarity row constant
        let mut p = small_params(3, 3);
        p.query = ConvSpec::zeros(3, 3, (1, 1), 1, 0).unwrap();
        p.output = ConvSpec::identity(3);
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| (i as f64 * 0.3).sin());
        let mut g = Graph::new();
        let b = p.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone());
        let o = b.forward(&mut g, xv).unwrap();
        let l = p.pyramid.len();
        // expected = x + mean of pooled value rows
        let (mv, _) = crate::ops::pool::pa2_forward(
            conv2d_forward(&x, &p.value.weight, &p.value.bias, 1, 0, Exec::Sequential)
                .unwrap()
                .data(),
            x.shape(),
            g.value(o.attention).data(),
            &p.pyramid.levels,
            p.pyramid.epsilon,
            Exec::Sequential,
        );
        for c in 0..3 {
            let mean: f64 = (0..l).map(|r| mv[r * 3 + c]).sum::<f64>() / l as f64;
            for y in 0..4 {
                for xx in 0..4 {
                    let got = g.value(o.out).at(0, c, y, xx) - x.at(0, c, y, xx);
                    assert!((got - mean).abs() < 1e-12);
                }
            }
        }
    }
}
