//! Reverse-mode tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Each node
//! records the op that produced it; [`Graph::backward`] walks the nodes in
//! reverse creation order and accumulates gradients into the inputs. There is
//! no graph rewriting: the backward pass visits exactly the recorded ops.

use crate::error::{shape_err, Result};
use crate::ops::{conv, matrix, pool, sample::BilinearTaps};
use crate::parallel::Exec;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row pick for [`Graph::gather`]: batch, first channel, y, x.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub batch: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

/// Per-position source for [`Graph::center_offsets`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPick {
    /// Channel holding the horizontal centre delta of the chosen anchor.
    pub channel_x: usize,
    /// Channel holding the vertical centre delta of the chosen anchor.
    pub channel_y: usize,
    /// Multiplier turning the horizontal delta into a grid offset.
    pub scale_x: f64,
    pub scale_y: f64,
}

/// Floor for the IoU inside `-ln(IoU)`.
pub const IOU_LOSS_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: conv::ConvGeom,
        cols: Vec<f64>,
    },
    AlignConv {
        input: Var,
        weight: Var,
        bias: Var,
        offsets: Var,
        geom: conv::ConvGeom,
        taps: Vec<BilinearTaps>,
        cols: Vec<f64>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AdaptiveAvgPool {
        input: Var,
        bins: (usize, usize),
    },
    Pa2Pool {
        features: Var,
        attn: Var,
        levels: Vec<(usize, usize)>,
        den: Vec<f64>,
    },
    ToRows(Var),
    FromRows(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Gather {
        input: Var,
        picks: Vec<Pick>,
    },
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    NegLogIou {
        pred: Var,
        gt: Vec<[f64; 4]>,
    },
    Decode2d {
        deltas: Var,
        anchors: Vec<[f64; 4]>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
    },
    CenterOffsets {
        head: Var,
        picks: Vec<CenterPick>,
        taps: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes and returns the value tensor of a node, leaving zeros.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        let s = self.shape(v);
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(s))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    // ---- forward ops ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let cols = conv::im2col(&geom, self.value(input).data(), self.exec);
        let out = conv::contract(
            &geom,
            &cols,
            self.value(weight).data(),
            self.value(bias).data(),
            self.exec,
        );
        let t = Tensor::from_vec(geom.output_shape(), out)?;
        let ng = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Convolution whose taps are displaced by `offsets` and read bilinearly.
    pub fn align_conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        offsets: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        conv::check_offsets(&geom, self.shape(offsets))?;
        let taps = conv::offset_taps(&geom, self.value(offsets).data(), self.exec);
        let cols = conv::sampled_cols(&geom, self.value(input).data(), &taps, self.exec);
        let out = conv::contract(
            &geom,
            &cols,
            self.value(weight).data(),
            self.value(bias).data(),
            self.exec,
        );
        let t = Tensor::from_vec(geom.output_shape(), out)?;
        let ng = self.any_grad(&[input, weight, bias, offsets]);
        Ok(self.push(
            t,
            Op::AlignConv {
                input,
                weight,
                bias,
                offsets,
                geom,
                taps,
                cols,
            },
            ng,
        ))
    }

    /// Batched `a · b` (or `a · bᵀ`) over `(B, 1, rows, cols)` tensors.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner_b = if trans_b { sb.width } else { sb.height };
        if sa.channels != 1 || sb.channels != 1 || sa.batch != sb.batch || sa.width != inner_b {
            return Err(shape_err(
                "matmul",
                format!("{sa} x {sb}{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let (out, m, n) = matrix::gemm(
            self.value(a).data(),
            dims(sa),
            false,
            self.value(b).data(),
            dims(sb),
            trans_b,
            self.exec,
        );
        let t = Tensor::from_vec(Shape::matrix(sa.batch, m, n), out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Softmax over the last (width) dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let y = matrix::softmax_rows(self.value(x).data(), s.width, self.exec);
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(s, y).expect("same shape"),
            Op::Softmax(x),
            ng,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.map(x, |v| v * k);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, k), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(s, d)?, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(s, d)?, Op::Mul(a, b), ng))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_vec(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn adaptive_avg_pool(&mut self, input: Var, bins: (usize, usize)) -> Result<Var> {
        if bins.0 == 0 || bins.1 == 0 {
            return Err(shape_err("adaptive_avg_pool", "bins must be positive"));
        }
        let s = self.shape(input);
        let out = pool::adaptive_avg_forward(self.value(input).data(), s, bins, self.exec);
        let t = Tensor::from_vec(Shape::new(s.batch, s.channels, bins.0, bins.1), out)?;
        let ng = self.any_grad(&[input]);
        Ok(self.push(t, Op::AdaptiveAvgPool { input, bins }, ng))
    }

    /// Attention-weighted pyramid pooling into a `(B, 1, L, C)` matrix.
    pub fn pa2_pool(
        &mut self,
        features: Var,
        attn: Var,
        levels: &[(usize, usize)],
        eps: f64,
    ) -> Result<Var> {
        let (sf, sa) = (self.shape(features), self.shape(attn));
        if sa != Shape::new(sf.batch, 1, sf.height, sf.width) {
            return Err(shape_err(
                "pa2_pool",
                format!("features {sf} vs attention {sa}"),
            ));
        }
        if levels.is_empty() {
            return Err(shape_err("pa2_pool", "no pyramid levels"));
        }
        let (out, den) = pool::pa2_forward(
            self.value(features).data(),
            sf,
            self.value(attn).data(),
            levels,
            eps,
            self.exec,
        );
        let l = pool::pyramid_len(levels);
        let t = Tensor::from_vec(Shape::matrix(sf.batch, l, sf.channels), out)?;
        let ng = self.any_grad(&[features, attn]);
        Ok(self.push(
            t,
            Op::Pa2Pool {
                features,
                attn,
                levels: levels.to_vec(),
                den,
            },
            ng,
        ))
    }

    /// `(B, C, H, W)` to `(B, 1, H·W, C)`: one row per pixel.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let src = self.value(x).data();
        let n = s.plane();
        let mut d = vec![0.0; s.numel()];
        for b in 0..s.batch {
            for c in 0..s.channels {
                for p in 0..n {
                    d[(b * n + p) * s.channels + c] = src[(b * s.channels + c) * n + p];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(Shape::matrix(s.batch, n, s.channels), d).expect("numel"),
            Op::ToRows(x),
            ng,
        )
    }

    /// Inverse of [`Graph::to_rows`].
    pub fn from_rows(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.channels != 1 || s.height != height * width {
            return Err(shape_err("from_rows", format!("{s} to {height}x{width}")));
        }
        let c = s.width;
        let n = s.height;
        let src = self.value(x).data();
        let mut d = vec![0.0; s.numel()];
        for b in 0..s.batch {
            for p in 0..n {
                for ch in 0..c {
                    d[(b * c + ch) * n + p] = src[(b * n + p) * c + ch];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(Shape::new(s.batch, c, height, width), d)?,
            Op::FromRows(x),
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ wᵢ·xᵢ` with constant weights; the usual probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {}", weights.len(), self.shape(x)),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), ng))
    }

    /// Gathers `width` consecutive channels at each pick into an `(1, 1, n, width)` matrix.
    pub fn gather(&mut self, input: Var, picks: Vec<Pick>, width: usize) -> Result<Var> {
        let s = self.shape(input);
        let v = self.value(input);
        let mut d = Vec::with_capacity(picks.len() * width);
        for p in &picks {
            if p.batch >= s.batch
                || p.channel + width > s.channels
                || p.y >= s.height
                || p.x >= s.width
            {
                return Err(shape_err(
                    "gather",
                    format!("pick {p:?} x{width} outside {s}"),
                ));
            }
            for j in 0..width {
                d.push(v.at(p.batch, p.channel + j, p.y, p.x));
            }
        }
        let t = Tensor::from_vec(Shape::matrix(1, picks.len(), width), d)?;
        let ng = self.any_grad(&[input]);
        Ok(self.push(t, Op::Gather { input, picks }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.batch != 1
            || sb.batch != 1
            || sa.channels != 1
            || sb.channels != 1
            || sa.height != sb.height
        {
            return Err(shape_err("concat_cols", format!("{sa} | {sb}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut d = Vec::with_capacity(sa.numel() + sb.numel());
        for r in 0..sa.height {
            d.extend_from_slice(&va[r * sa.width..(r + 1) * sa.width]);
            d.extend_from_slice(&vb[r * sb.width..(r + 1) * sb.width]);
        }
        let t = Tensor::from_vec(Shape::matrix(1, sa.height, sa.width + sb.width), d)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::ConcatCols(a, b), ng))
    }

    /// Mean cross-entropy of `(1, 1, n, classes)` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let s = self.shape(logits);
        if s.batch != 1 || s.channels != 1 || s.height != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{s} for {} targets", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= s.width) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {t} >= {} classes", s.width),
            ));
        }
        let probs = matrix::softmax_rows(self.value(logits).data(), s.width, self.exec);
        let n = targets.len();
        let loss = if n == 0 {
            0.0
        } else {
            let lv = self.value(logits).data();
            let total: f64 = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let row = &lv[i * s.width..(i + 1) * s.width];
                    log_sum_exp(row) - row[t]
                })
                .sum();
            total / n as f64
        };
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// Mean `-ln IoU` between predicted corner boxes `(1, 1, n, 4)` and targets.
    pub fn neg_log_iou(&mut self, pred: Var, gt: Vec<[f64; 4]>) -> Result<Var> {
        let s = self.shape(pred);
        if s.batch != 1 || s.channels != 1 || s.width != 4 || s.height != gt.len() {
            return Err(shape_err(
                "neg_log_iou",
                format!("{s} for {} targets", gt.len()),
            ));
        }
        let pv = self.value(pred).data();
        let n = gt.len();
        let total: f64 = (0..n)
            .map(|i| {
                let p = [pv[4 * i], pv[4 * i + 1], pv[4 * i + 2], pv[4 * i + 3]];
                -iou_with_grad(p, gt[i]).0.max(IOU_LOSS_EPS).ln()
            })
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::NegLogIou { pred, gt }, ng))
    }

    /// Turns 2D deltas `(tx, ty, tw, th)` into corners using `[cx, cy, w, h]` anchors.
    pub fn decode_2d(&mut self, deltas: Var, anchors: Vec<[f64; 4]>) -> Result<Var> {
        let s = self.shape(deltas);
        if s.batch != 1 || s.channels != 1 || s.width != 4 || s.height != anchors.len() {
            return Err(shape_err(
                "decode_2d",
                format!("{s} for {} anchors", anchors.len()),
            ));
        }
        let dv = self.value(deltas).data();
        let mut d = Vec::with_capacity(dv.len());
        for (i, a) in anchors.iter().enumerate() {
            let [tx, ty, tw, th] = [dv[4 * i], dv[4 * i + 1], dv[4 * i + 2], dv[4 * i + 3]];
            let cx = tx * a[2] + a[0];
            let cy = ty * a[3] + a[1];
            let w = tw.exp() * a[2];
            let h = th.exp() * a[3];
            d.extend_from_slice(&[cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
        }
        let ng = self.any_grad(&[deltas]);
        Ok(self.push(
            Tensor::from_vec(s, d)?,
            Op::Decode2d { deltas, anchors },
            ng,
        ))
    }

    /// `Σ smoothL1(pred − target)` over columns, averaged over rows.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let s = self.shape(pred);
        if s.batch != 1 || s.channels != 1 || target.len() != s.numel() {
            return Err(shape_err(
                "smooth_l1",
                format!("{s} for {} targets", target.len()),
            ));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| smooth_l1(p - t))
            .sum();
        let loss = if s.height == 0 {
            0.0
        } else {
            total / s.height as f64
        };
        let ng = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target }, ng))
    }

    /// Builds a `(B, 2·taps, H, W)` offset field from per-position centre deltas.
    ///
    /// `picks` is indexed by `(b·H + y)·W + x`; every tap receives the same
    /// `(dy, dx) = (head[channel_y]·scale_y, head[channel_x]·scale_x)`.
    pub fn center_offsets(
        &mut self,
        head: Var,
        picks: Vec<CenterPick>,
        taps: usize,
    ) -> Result<Var> {
        let s = self.shape(head);
        if picks.len() != s.batch * s.plane() || taps == 0 {
            return Err(shape_err(
                "center_offsets",
                format!("{} picks for {s}", picks.len()),
            ));
        }
        if picks
            .iter()
            .any(|p| p.channel_x >= s.channels || p.channel_y >= s.channels)
        {
            return Err(shape_err("center_offsets", "channel outside head"));
        }
        let out_shape = Shape::new(s.batch, 2 * taps, s.height, s.width);
        let mut t = Tensor::zeros(out_shape);
        let hv = self.value(head);
        for b in 0..s.batch {
            for y in 0..s.height {
                for x in 0..s.width {
                    let p = picks[(b * s.height + y) * s.width + x];
                    let dy = hv.at(b, p.channel_y, y, x) * p.scale_y;
                    let dx = hv.at(b, p.channel_x, y, x) * p.scale_x;
                    for k in 0..taps {
                        t.set(b, 2 * k, y, x, dy);
                        t.set(b, 2 * k + 1, y, x, dx);
                    }
                }
            }
        }
        let ng = self.any_grad(&[head]);
        Ok(self.push(t, Op::CenterOffsets { head, picks, taps }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar node. Clears gradients from any
    /// previous call first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got {}", self.shape(root)),
            ));
        }
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.nodes[root.0].value.grad_mut()[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            for (v, d) in contribs {
                if self.nodes[v.0].needs_grad {
                    accumulate(self.nodes[v.0].value.grad_mut(), &d);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let exec = self.exec;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (gw, gb, gc) = conv::contract_backward(geom, cols, val(*weight), g, exec);
                let mut out = vec![(*weight, gw), (*bias, gb)];
                if self.nodes[input.0].needs_grad {
                    out.push((*input, conv::col2im(geom, &gc, exec)));
                }
                out
            }
            Op::AlignConv {
                input,
                weight,
                bias,
                offsets,
                geom,
                taps,
                cols,
            } => {
                let (gw, gb, gc) = conv::contract_backward(geom, cols, val(*weight), g, exec);
                let (gi, go) = conv::sampled_backward(geom, val(*input), taps, &gc, exec);
                vec![(*weight, gw), (*bias, gb), (*input, gi), (*offsets, go)]
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let sc = node.value.shape();
                let gd = dims(sc);
                // C = A·B  : dA = dC·Bᵀ, dB = Aᵀ·dC
                // C = A·Bᵀ : dA = dC·B,  dB = dCᵀ·A
                let (ga, _, _) = matrix::gemm(g, gd, false, val(*b), dims(sb), !trans_b, exec);
                let gb = if *trans_b {
                    matrix::gemm(g, gd, true, val(*a), dims(sa), false, exec).0
                } else {
                    matrix::gemm(val(*a), dims(sa), true, g, gd, false, exec).0
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax(x) => {
                let cols = node.value.shape().width;
                vec![(
                    *x,
                    matrix::softmax_rows_backward(node.value.data(), g, cols, exec),
                )]
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, d)| d * y * (1.0 - y))
                    .collect();
                vec![(*x, d)]
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(d, y)| d * y).collect();
                let db = g.iter().zip(val(*a)).map(|(d, x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, k) => vec![(*x, g.iter().map(|d| d * k).collect())],
            Op::AdaptiveAvgPool { input, bins } => {
                vec![(
                    *input,
                    pool::adaptive_avg_backward(g, self.shape(*input), *bins, exec),
                )]
            }
            Op::Pa2Pool {
                features,
                attn,
                levels,
                den,
            } => {
                let (gf, ga) = pool::pa2_backward(
                    g,
                    val(*features),
                    self.shape(*features),
                    val(*attn),
                    node.value.data(),
                    den,
                    levels,
                    exec,
                );
                vec![(*features, gf), (*attn, ga)]
            }
            Op::ToRows(x) => {
                let s = self.shape(*x);
                let n = s.plane();
                let mut d = vec![0.0; s.numel()];
                for b in 0..s.batch {
                    for c in 0..s.channels {
                        for p in 0..n {
                            d[(b * s.channels + c) * n + p] = g[(b * n + p) * s.channels + c];
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::FromRows(x) => {
                let s = self.shape(*x);
                let (n, c) = (s.height, s.width);
                let mut d = vec![0.0; s.numel()];
                for b in 0..s.batch {
                    for p in 0..n {
                        for ch in 0..c {
                            d[(b * n + p) * c + ch] = g[(b * c + ch) * n + p];
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::WeightedSum(x, w) => vec![(*x, w.iter().map(|w| w * g[0]).collect())],
            Op::Gather { input, picks } => {
                let s = self.shape(*input);
                let width = node.value.shape().width;
                let mut d = vec![0.0; s.numel()];
                for (r, p) in picks.iter().enumerate() {
                    for j in 0..width {
                        d[s.index(p.batch, p.channel + j, p.y, p.x)] += g[r * width + j];
                    }
                }
                vec![(*input, d)]
            }
            Op::ConcatCols(a, b) => {
                let (wa, wb) = (self.shape(*a).width, self.shape(*b).width);
                let rows = self.shape(*a).height;
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for r in 0..rows {
                    let row = &g[r * (wa + wb)..(r + 1) * (wa + wb)];
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits).width;
                let n = targets.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= g[0] / n;
                }
                vec![(*logits, d)]
            }
            Op::NegLogIou { pred, gt } => {
                let pv = val(*pred);
                let n = gt.len().max(1) as f64;
                let mut d = vec![0.0; pv.len()];
                for (i, t) in gt.iter().enumerate() {
                    let p = [pv[4 * i], pv[4 * i + 1], pv[4 * i + 2], pv[4 * i + 3]];
                    let (iou, di) = iou_with_grad(p, *t);
                    if iou > IOU_LOSS_EPS {
                        for j in 0..4 {
                            d[4 * i + j] = -di[j] / iou * g[0] / n;
                        }
                    }
                }
                vec![(*pred, d)]
            }
            Op::Decode2d { deltas, anchors } => {
                let dv = val(*deltas);
                let mut d = vec![0.0; dv.len()];
                for (i, a) in anchors.iter().enumerate() {
                    let [g1, g2, g3, g4] = [g[4 * i], g[4 * i + 1], g[4 * i + 2], g[4 * i + 3]];
                    let w = dv[4 * i + 2].exp() * a[2];
                    let h = dv[4 * i + 3].exp() * a[3];
                    d[4 * i] = (g1 + g3) * a[2];
                    d[4 * i + 1] = (g2 + g4) * a[3];
                    d[4 * i + 2] = (g3 - g1) / 2.0 * w;
                    d[4 * i + 3] = (g4 - g2) / 2.0 * h;
                }
                vec![(*deltas, d)]
            }
            Op::SmoothL1 { pred, target } => {
                let rows = self.shape(*pred).height.max(1) as f64;
                let d = val(*pred)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| (p - t).clamp(-1.0, 1.0) * g[0] / rows)
                    .collect();
                vec![(*pred, d)]
            }
            Op::CenterOffsets { head, picks, taps } => {
                let s = self.shape(*head);
                let os = node.value.shape();
                let mut d = vec![0.0; s.numel()];
                for b in 0..s.batch {
                    for y in 0..s.height {
                        for x in 0..s.width {
                            let p = picks[(b * s.height + y) * s.width + x];
                            let (mut gy, mut gx) = (0.0, 0.0);
                            for k in 0..*taps {
                                gy += g[os.index(b, 2 * k, y, x)];
                                gx += g[os.index(b, 2 * k + 1, y, x)];
                            }
                            d[s.index(b, p.channel_y, y, x)] += gy * p.scale_y;
                            d[s.index(b, p.channel_x, y, x)] += gx * p.scale_x;
                        }
                    }
                }
                vec![(*head, d)]
            }
        }
    }
}

fn dims(s: Shape) -> matrix::MatDims {
    matrix::MatDims {
        batch: s.batch,
        rows: s.height,
        cols: s.width,
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Smooth L1 with unit transition point.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Axis-aligned IoU of `[x1, y1, x2, y2]` boxes and its gradient with
/// respect to the first box.
pub fn iou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let ix1 = p[0].max(t[0]);
    let iy1 = p[1].max(t[1]);
    let ix2 = p[2].min(t[2]);
    let iy2 = p[3].min(t[3]);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let iou = inter / union;
    let d_inter = [
        if p[0] > t[0] { -ih } else { 0.0 },
        if p[1] > t[1] { -iw } else { 0.0 },
        if p[2] < t[2] { ih } else { 0.0 },
        if p[3] < t[3] { iw } else { 0.0 },
    ];
    let d_area = [-ph, -pw, ph, pw];
    let mut d = [0.0; 4];
    for j in 0..4 {
        let d_union = d_area[j] - d_inter[j];
        d[j] = (d_inter[j] * union - inter * d_union) / (union * union);
    }
    (iou, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut g = Graph::with_exec(Exec::Sequential);
        let x = g.leaf(Tensor::from_fn(Shape::new(1, 1, 3, 4), |i| i as f64 - 5.0));
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(t(
            Shape::matrix(1, 2, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ));
        let eye = g.constant(t(
            Shape::matrix(1, 3, 3),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let c = g.matmul(a, eye, false).unwrap();
        assert_eq!(g.value(c).data(), g.value(a).data());
        assert!(g.matmul(a, a, false).is_err());
        assert!(g.matmul(a, a, true).is_ok());
    }

    #[test]
    fn add_refuses_broadcast() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let r = g.relu(a);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]));
        let c = g.constant(t(Shape::new(1, 1, 1, 2), vec![3.0, 4.0]));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(Shape::matrix(1, 3, 4)));
        let ce = g.cross_entropy(l, vec![0, 2, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn to_rows_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(Shape::new(2, 3, 2, 2), |i| i as f64));
        let r = g.to_rows(x);
        assert_eq!(g.shape(r), Shape::matrix(2, 4, 3));
        assert_eq!(g.value(r).at(0, 0, 1, 2), g.value(x).at(0, 2, 0, 1));
        let back = g.from_rows(r, 2, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn iou_half() {
        let (iou, _) = iou_with_grad([0.0, 0.0, 2.0, 1.0], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou, 0.5);
    }
}
