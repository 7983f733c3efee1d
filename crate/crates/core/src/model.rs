//! Small detector built from the library blocks: a stride-8 backbone, a
//! classification head whose best anchor drives shape alignment, a
//! centre-aligned 3D head, and an attention block in front of the depth head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{select_best_anchor, shape_align_offsets, OffsetField};
use crate::anab::{AnabParams, BoundAnab, PyramidSpec};
use crate::anchors::{
    cell_center, decode, default_templates, encode, Anchor, AnchorTemplate, BoxDeltas,
};
use crate::error::{arg_err, Result};
use crate::graph::{CenterPick, Graph, Pick, Var};
use crate::loss::{
    assign_anchors, cross_entropy_row, select_training_samples, Assignment, LossConfig,
};
use crate::nn::{BoundConv, ConvSpec};
use crate::parallel::Exec;
use crate::postproc::{optimize_rotation, postprocess, Detection, RotationSearch};
use crate::scene::{stack_images, Scene, SCENE_CHANNELS};
use crate::tensor::Tensor;

/// Which centre prediction feeds the centre-alignment offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenterSource {
    /// Projected 3D centre `(t_x, t_y)₃d`.
    #[default]
    Projected3d,
    /// 2D box centre `(t_x, t_y)₂d`.
    Box2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature channels after the backbone.
    pub width: usize,
    /// Object classes, not counting background.
    pub classes: usize,
    pub pyramid: PyramidSpec,
    pub center_source: CenterSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: SCENE_CHANNELS,
            width: 24,
            classes: 1,
            pyramid: PyramidSpec::square(&[1, 2, 4]).expect("valid"),
            center_source: CenterSource::default(),
            seed: 7,
        }
    }
}

pub const STRIDE: usize = 8;
const BACKBONE_BIAS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub templates: Vec<AnchorTemplate>,
    pub backbone: [ConvSpec; 3],
    pub cls: ConvSpec,
    pub shape_align: ConvSpec,
    pub head_2d: ConvSpec,
    pub head_center: ConvSpec,
    pub center_align: ConvSpec,
    pub head_3d: ConvSpec,
    pub anab: AnabParams,
    pub head_depth: ConvSpec,
}

/// Graph handles for one bound copy of the model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    backbone: [BoundConv; 3],
    cls: BoundConv,
    shape_align: BoundConv,
    head_2d: BoundConv,
    head_center: BoundConv,
    center_align: BoundConv,
    head_3d: BoundConv,
    anab: BoundAnab,
    head_depth: BoundConv,
    vars: Vec<Var>,
}

/// Forward-pass nodes and the anchor choices made along the way.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// `(B, A·(classes+1), h, w)`
    pub cls: Var,
    /// `(B, 4A, h, w)`: `t_x, t_y, t_w, t_h` of the 2D box.
    pub d2: Var,
    /// `(B, 2A, h, w)`: projected 3D centre `t_x, t_y`.
    pub center: Var,
    /// `(B, 4A, h, w)`: `t_w, t_h, t_l, t_α`.
    pub d3: Var,
    /// `(B, A, h, w)`: `t_z`.
    pub depth: Var,
    pub attention: Var,
    /// Best anchor per `(b, y, x)`, row-major.
    pub best: Vec<usize>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub l2d: Var,
    pub l3d: Var,
    pub positives: usize,
    pub mined: usize,
}

impl Model {
    pub fn new(config: ModelConfig, templates: Vec<AnchorTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(arg_err("Model::new", "need at least one anchor template"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, a, k) = (config.width, templates.len(), config.classes + 1);
        let conv = |i, o, ks, s, p, gain, rng: &mut ChaCha8Rng| {
            ConvSpec::random(i, o, (ks, ks), s, p, gain, rng)
        };
        // Gain 2 keeps features large enough to train at the reference
        // learning rate. Heads start at zero, so the first loss is the loss
        // of the anchor prior itself.
        let (bg, hg) = (2.0, 0.0);
        let mut backbone = [
            conv(config.in_channels, c, 3, 2, 1, bg, &mut rng)?,
            conv(c, c, 3, 2, 1, bg, &mut rng)?,
            conv(c, c, 3, 2, 1, bg, &mut rng)?,
        ];
        // a small positive bias keeps background features alive, otherwise
        // background anchors only see the classifier bias
        for layer in backbone.iter_mut() {
            layer.bias.data_mut().fill(BACKBONE_BIAS);
        }
        let cls = conv(c, a * k, 3, 1, 1, hg, &mut rng)?;
        let shape_align = conv(c, c, 3, 1, 1, bg, &mut rng)?;
        let head_2d = conv(c, 4 * a, 1, 1, 0, hg, &mut rng)?;
        let head_center = conv(c, 2 * a, 1, 1, 0, hg, &mut rng)?;
        let center_align = conv(c, c, 1, 1, 0, bg, &mut rng)?;
        let head_3d = conv(c, 4 * a, 1, 1, 0, hg, &mut rng)?;
        let anab = AnabParams::random(c, config.pyramid.clone(), &mut rng)?;
        let head_depth = conv(c, a, 1, 1, 0, hg, &mut rng)?;
        Ok(Self {
            config,
            templates,
            backbone,
            cls,
            shape_align,
            head_2d,
            head_center,
            center_align,
            head_3d,
            anab,
            head_depth,
        })
    }

    /// Default configuration with the 36 standard templates.
    pub fn with_default_anchors(config: ModelConfig) -> Result<Self> {
        Self::new(config, default_templates())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.templates.len()
    }

    fn convs(&self) -> [&ConvSpec; 9] {
        [
            &self.backbone[0],
            &self.backbone[1],
            &self.backbone[2],
            &self.cls,
            &self.shape_align,
            &self.head_2d,
            &self.head_center,
            &self.center_align,
            &self.head_3d,
        ]
    }

    /// Every trainable tensor, in binding order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .convs()
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect();
        v.extend(self.anab.tensors());
        v.extend([&self.head_depth.weight, &self.head_depth.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        let [b0, b1, b2] = &mut self.backbone;
        for c in [
            b0,
            b1,
            b2,
            &mut self.cls,
            &mut self.shape_align,
            &mut self.head_2d,
            &mut self.head_center,
            &mut self.center_align,
            &mut self.head_3d,
        ] {
            v.extend(c.params_mut());
        }
        v.extend(self.anab.params_mut());
        v.extend(self.head_depth.params_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        self.bind_vars(&vars)
    }

    /// Builds the bound model from variables in [`tensors`](Self::tensors) order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let n = self.tensors().len();
        if vars.len() != n {
            return Err(arg_err(
                "Model::bind_vars",
                format!("expected {n} variables, got {}", vars.len()),
            ));
        }
        let convs = self.convs();
        let bc = |i: usize| BoundConv {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
            stride: convs[i].stride,
            padding: convs[i].padding,
        };
        let anab = self.anab.bind_vars(&vars[18..28])?;
        Ok(BoundModel {
            backbone: [bc(0), bc(1), bc(2)],
            cls: bc(3),
            shape_align: bc(4),
            head_2d: bc(5),
            head_center: bc(6),
            center_align: bc(7),
            head_3d: bc(8),
            anab,
            head_depth: BoundConv {
                weight: vars[28],
                bias: vars[29],
                stride: 1,
                padding: 0,
            },
            vars: vars.to_vec(),
        })
    }

    /// Anchors for an `h × w` feature grid, ordered by row, column, template.
    pub fn anchor_grid(&self, h: usize, w: usize) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(h * w * self.templates.len());
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = cell_center(y, x, STRIDE);
                for (i, t) in self.templates.iter().enumerate() {
                    out.push(Anchor::at(cx, cy, i, t));
                }
            }
        }
        out
    }

    /// Softmax probability of the best object class per anchor, with that class.
    fn anchor_scores(&self, logits: &Tensor, b: usize, y: usize, x: usize) -> Vec<(f64, usize)> {
        let k = self.config.classes + 1;
        (0..self.templates.len())
            .map(|a| {
                let row: Vec<f64> = (0..k).map(|j| logits.at(b, a * k + j, y, x)).collect();
                let p = crate::ops::matrix::softmax_rows(&row, k, Exec::Sequential);
                let (cls, score) =
                    p[1..]
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                        );
                (score, cls)
            })
            .collect()
    }

    /// Runs the full network and turns every anchor into a scored detection,
    /// then applies NMS, the confidence filter and optional yaw refinement.
    pub fn detect(&self, scenes: &[&Scene], cfg: &DetectConfig) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let img = g.constant(stack_images(scenes)?);
        let out = m.forward(&mut g, self, img)?;
        let (h, w) = out.grid;
        let anchors = self.anchor_grid(h, w);
        let a_n = self.templates.len();
        let (cls, d2, ctr, d3, dz) = (
            g.value(out.cls),
            g.value(out.d2),
            g.value(out.center),
            g.value(out.d3),
            g.value(out.depth),
        );
        let mut all = Vec::with_capacity(scenes.len());
        for (b, scene) in scenes.iter().enumerate() {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    for (a, (score, c)) in self.anchor_scores(cls, b, y, x).into_iter().enumerate()
                    {
                        cands.push((score, c, (y * w + x) * a_n + a));
                    }
                }
            }
            cands.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.2.cmp(&q.2)));
            cands.truncate(cfg.pre_nms_top);
            let mut dets = Vec::new();
            for (score, class, idx) in cands {
                let anchor = &anchors[idx];
                let (y, x, a) = (idx / a_n / w, idx / a_n % w, idx % a_n);
                let deltas = BoxDeltas {
                    d2: [0, 1, 2, 3].map(|j| d2.at(b, 4 * a + j, y, x)),
                    d3: [
                        ctr.at(b, 2 * a, y, x),
                        ctr.at(b, 2 * a + 1, y, x),
                        dz.at(b, a, y, x),
                        d3.at(b, 4 * a, y, x),
                        d3.at(b, 4 * a + 1, y, x),
                        d3.at(b, 4 * a + 2, y, x),
                        d3.at(b, 4 * a + 3, y, x),
                    ],
                };
                let (box2d, proj) = decode(anchor, &deltas);
                if !(box2d.width() >= 0.0 && box2d.height() >= 0.0) {
                    continue;
                }
                let Ok(box3d) = proj.to_box3d(&scene.camera) else {
                    continue;
                };
                dets.push(Detection {
                    class,
                    score,
                    box2d,
                    box3d,
                    alpha: proj.alpha,
                });
            }
            let mut kept = postprocess(&dets, cfg.nms_iou, cfg.min_score);
            if cfg.refine_yaw {
                for d in kept.iter_mut() {
                    *d = optimize_rotation(d, &scene.camera, &RotationSearch::default()).detection;
                }
            }
            all.push(kept);
        }
        Ok(all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub pre_nms_top: usize,
    pub nms_iou: f64,
    pub min_score: f64,
    pub refine_yaw: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 200,
            nms_iou: crate::postproc::NMS_IOU,
            min_score: crate::postproc::MIN_CONFIDENCE,
            refine_yaw: true,
        }
    }
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward(&self, g: &mut Graph, model: &Model, images: Var) -> Result<Outputs> {
        let mut f = images;
        for c in &self.backbone {
            let z = c.apply(g, f)?;
            f = g.relu(z);
        }
        let fs = g.shape(f);
        let (bn, h, w) = (fs.batch, fs.height, fs.width);
        let cls = self.cls.apply(g, f)?;

        // best anchor per position from the raw classification scores
        let hw: Vec<(f64, f64)> = model.templates.iter().map(|t| (t.h, t.w)).collect();
        let logits = g.value(cls).clone();
        let mut best = Vec::with_capacity(bn * h * w);
        let mut fields = Vec::with_capacity(bn);
        for b in 0..bn {
            let mut scores = Vec::with_capacity(h * w * hw.len());
            for y in 0..h {
                for x in 0..w {
                    scores.extend(
                        model
                            .anchor_scores(&logits, b, y, x)
                            .into_iter()
                            .map(|s| s.0),
                    );
                }
            }
            let sel = select_best_anchor(&scores, &hw)?;
            let sizes: Vec<(f64, f64)> = sel.iter().map(|s| s.1).collect();
            best.extend(sel.iter().map(|s| s.0));
            fields.push(shape_align_offsets(&sizes, h, w, STRIDE, (3, 3))?);
        }
        let sa_offsets = g.constant(OffsetField::stack(&fields)?);
        let fsa = self.shape_align.apply_aligned(g, f, sa_offsets)?;
        let fsa = g.relu(fsa);
        let d2 = self.head_2d.apply(g, fsa)?;
        let center = self.head_center.apply(g, fsa)?;

        let (src, per) = match model.config.center_source {
            CenterSource::Projected3d => (center, 2),
            CenterSource::Box2d => (d2, 4),
        };
        let picks: Vec<CenterPick> = best
            .iter()
            .map(|&a| {
                let t = &model.templates[a];
                CenterPick {
                    channel_x: per * a,
                    channel_y: per * a + 1,
                    scale_x: t.w / STRIDE as f64,
                    scale_y: t.h / STRIDE as f64,
                }
            })
            .collect();
        let ca_offsets = g.center_offsets(src, picks, 1)?;
        let fca = self.center_align.apply_aligned(g, fsa, ca_offsets)?;
        let fca = g.relu(fca);
        let d3 = self.head_3d.apply(g, fca)?;
        let att = self.anab.forward(g, fca)?;
        let depth = self.head_depth.apply(g, att.out)?;
        Ok(Outputs {
            cls,
            d2,
            center,
            d3,
            depth,
            attention: att.attention,
            best,
            grid: (h, w),
        })
    }

    /// Builds the training loss for `scenes` (same order as the batch).
    pub fn loss(
        &self,
        g: &mut Graph,
        model: &Model,
        out: &Outputs,
        scenes: &[&Scene],
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        cfg.validate()?;
        let (h, w) = out.grid;
        let anchors = model.anchor_grid(h, w);
        let a_n = model.templates.len();
        let k = model.config.classes + 1;
        let per_image = anchors.len();

        let logits = g.value(out.cls);
        let mut roles = Vec::with_capacity(per_image * scenes.len());
        let mut ce = Vec::with_capacity(per_image * scenes.len());
        for (b, s) in scenes.iter().enumerate() {
            let r = assign_anchors(&anchors, &s.gt_boxes(), cfg);
            for (idx, role) in r.iter().enumerate() {
                let (y, x, a) = (idx / a_n / w, idx / a_n % w, idx % a_n);
                let row: Vec<f64> = (0..k).map(|j| logits.at(b, a * k + j, y, x)).collect();
                let t = match role {
                    Assignment::Positive { gt } => s.objects[*gt].class + 1,
                    _ => 0,
                };
                ce.push((cross_entropy_row(&row, t), t));
            }
            roles.extend(r);
        }
        let losses: Vec<f64> = ce.iter().map(|c| c.0).collect();
        let keep = select_training_samples(&losses, &roles, cfg.hard_negative_fraction);

        let pick = |flat: usize, per: usize| {
            let (b, idx) = (flat / per_image, flat % per_image);
            let (y, x, a) = (idx / a_n / w, idx / a_n % w, idx % a_n);
            Pick {
                batch: b,
                channel: per * a,
                y,
                x,
            }
        };
        let cls_rows = g.gather(out.cls, keep.iter().map(|&i| pick(i, k)).collect(), k)?;
        let l_cls = g.cross_entropy(cls_rows, keep.iter().map(|&i| ce[i].1).collect())?;

        let mut pos = Vec::new();
        let mut gt2 = Vec::new();
        let mut anchors2 = Vec::new();
        let mut t3 = Vec::new();
        for (flat, role) in roles.iter().enumerate() {
            let Assignment::Positive { gt } = role else {
                continue;
            };
            let s = scenes[flat / per_image];
            let o = &s.objects[*gt];
            let anchor = &anchors[flat % per_image];
            let enc = encode(anchor, &o.box2d, &o.projected(&s.camera)?)?;
            pos.push(flat);
            gt2.push(o.box2d.corners());
            anchors2.push(anchor.cxcywh());
            t3.extend_from_slice(&enc.d3);
        }
        let d2_rows = g.gather(out.d2, pos.iter().map(|&i| pick(i, 4)).collect(), 4)?;
        let boxes = g.decode_2d(d2_rows, anchors2)?;
        let l2d = g.neg_log_iou(boxes, gt2)?;
        let c_rows = g.gather(out.center, pos.iter().map(|&i| pick(i, 2)).collect(), 2)?;
        let z_rows = g.gather(out.depth, pos.iter().map(|&i| pick(i, 1)).collect(), 1)?;
        let s_rows = g.gather(out.d3, pos.iter().map(|&i| pick(i, 4)).collect(), 4)?;
        let cz = g.concat_cols(c_rows, z_rows)?;
        let p3 = g.concat_cols(cz, s_rows)?;
        let l3d = g.smooth_l1(p3, t3)?;

        let a = g.scale(l2d, cfg.lambda_2d);
        let b = g.scale(l3d, cfg.lambda_3d);
        let ab = g.add(a, b)?;
        let total = g.add(l_cls, ab)?;
        Ok(LossVars {
            total,
            cls: l_cls,
            l2d,
            l3d,
            positives: pos.len(),
            mined: keep.len(),
        })
    }
}

/// Loss value and gradients of every model tensor for one batch.
pub fn loss_and_grads(
    model: &Model,
    scenes: &[&Scene],
    cfg: &LossConfig,
    exec: Exec,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let mut g = Graph::with_exec(exec);
    let m = model.bind(&mut g, true)?;
    let img = g.constant(stack_images(scenes)?);
    let out = m.forward(&mut g, model, img)?;
    let l = m.loss(&mut g, model, &out, scenes, cfg)?;
    let values = LossValues {
        cls: g.value(l.cls).item(),
        l2d: g.value(l.l2d).item(),
        l3d: g.value(l.l3d).item(),
        total: g.value(l.total).item(),
    };
    g.backward(l.total)?;
    let grads = m
        .vars()
        .iter()
        .zip(model.tensors())
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((values, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

/// Shape of the feature grid for an `H × W` image.
pub fn feature_grid(height: usize, width: usize) -> (usize, usize) {
    let down = |n: usize| (n + 2 - 3) / 2 + 1;
    (down(down(down(height))), down(down(down(width))))
}

/// Attention map of the first scene as an `(h, w)` row-major plane.
pub fn attention_map_of(model: &Model, scene: &Scene) -> Result<(usize, usize, Vec<f64>)> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, false)?;
    let img = g.constant(scene.image.clone());
    let out = m.forward(&mut g, model, img)?;
    let (h, w) = out.grid;
    Ok((h, w, g.value(out.attention).data().to_vec()))
}
