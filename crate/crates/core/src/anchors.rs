//! Anchor grid, per-template 3D statistics and the delta codec.
//!
//! Decoding, with `∘` the element-wise product:
//!
//! ```text
//! [X, Y]₂d       = [t_x, t_y]₂d ∘ [w, h]₂d + [x, y]
//! [W, H]₂d       = exp([t_w, t_h]₂d) ∘ [w, h]₂d
//! [X_p, Y_p]     = [t_x, t_y]₃d ∘ [w, h]₂d + [x, y]
//! [W, H, L]₃d    = exp([t_w, t_h, t_l]₃d) ∘ [w, h, l]₃d
//! [Z_p, α]       = [t_z, t_α] + [z, α]
//! ```

use std::fmt::Write as _;

use crate::error::{arg_err, Error, Result};
use crate::geometry::{alpha_to_yaw, iou_2d, wrap_angle, Box2D, Box3D, CameraIntrinsics};

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 1.0, 1.5];
pub const DEFAULT_STRIDE: usize = 8;

/// `count` sizes growing geometrically from `min` to `max`.
pub fn anchor_sizes(count: usize, min: f64, max: f64) -> Vec<f64> {
    if count == 1 {
        return vec![min];
    }
    (0..count)
        .map(|i| min * (max / min).powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// The twelve sizes `24·12^(i/11)`.
pub fn default_sizes() -> Vec<f64> {
    anchor_sizes(12, 24.0, 288.0)
}

/// Mean 3D parameters of the objects matched to a template.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorStats {
    /// Projected-centre depth.
    pub z: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    /// Observation angle.
    pub alpha: f64,
}

impl AnchorStats {
    pub fn is_finite(&self) -> bool {
        [self.z, self.w, self.h, self.l, self.alpha]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A 2D template `(w, h)` with its 3D statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTemplate {
    pub w: f64,
    pub h: f64,
    pub stats: AnchorStats,
}

/// Templates for every `(size, ratio)` pair, size-major, with
/// `(w, h) = (s/√r, s·√r)`.
pub fn make_templates(sizes: &[f64], ratios: &[f64]) -> Result<Vec<AnchorTemplate>> {
    if sizes.is_empty() || ratios.is_empty() {
        return Err(arg_err(
            "make_templates",
            "need at least one size and one ratio",
        ));
    }
    if sizes
        .iter()
        .chain(ratios)
        .any(|v| !(*v > 0.0 && v.is_finite()))
    {
        return Err(arg_err(
            "make_templates",
            "sizes and ratios must be positive",
        ));
    }
    Ok(sizes
        .iter()
        .flat_map(|&s| {
            ratios.iter().map(move |&r| AnchorTemplate {
                w: s / r.sqrt(),
                h: s * r.sqrt(),
                stats: AnchorStats::default(),
            })
        })
        .collect())
}

pub fn default_templates() -> Vec<AnchorTemplate> {
    make_templates(&default_sizes(), &DEFAULT_RATIOS).expect("valid defaults")
}

/// An anchor placed at a grid position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    /// Pixel centre.
    pub x: f64,
    pub y: f64,
    pub template: usize,
    pub w: f64,
    pub h: f64,
    pub stats: AnchorStats,
}

impl Anchor {
    pub fn at(x: f64, y: f64, template: usize, t: &AnchorTemplate) -> Self {
        Self {
            x,
            y,
            template,
            w: t.w,
            h: t.h,
            stats: t.stats,
        }
    }

    pub fn box2d(&self) -> Box2D {
        Box2D::from_center(self.x, self.y, self.w, self.h)
    }

    /// `[cx, cy, w, h]`, the form the graph decoder takes.
    pub fn cxcywh(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Pixel centre of grid cell `(row, col)`.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    (col as f64 * s + s / 2.0, row as f64 * s + s / 2.0)
}

/// All anchors over a `feature_hw` grid, ordered by row, column, then template.
pub fn generate_anchor_grid(
    feature_hw: (usize, usize),
    stride: usize,
    sizes: &[f64],
    ratios: &[f64],
) -> Result<Vec<Anchor>> {
    if stride == 0 {
        return Err(arg_err("generate_anchor_grid", "stride must be >= 1"));
    }
    let templates = make_templates(sizes, ratios)?;
    let (h, w) = feature_hw;
    let mut out = Vec::with_capacity(h * w * templates.len());
    for row in 0..h {
        for col in 0..w {
            let (cx, cy) = cell_center(row, col, stride);
            for (i, t) in templates.iter().enumerate() {
                out.push(Anchor::at(cx, cy, i, t));
            }
        }
    }
    Ok(out)
}

/// A labelled object as seen by the statistics fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsSample {
    pub box2d: Box2D,
    pub stats: AnchorStats,
}

/// Overlap of two boxes after moving both to the origin.
pub fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    iou_2d(
        &Box2D::from_center(0.0, 0.0, w0, h0),
        &Box2D::from_center(0.0, 0.0, w1, h1),
    )
}

/// Sets each template's statistics to the mean over objects whose 2D shape
/// overlaps it by at least `iou_thresh`; templates with no match get the
/// mean over all objects.
pub fn fit_anchor_3d_stats(
    templates: &mut [AnchorTemplate],
    objects: &[StatsSample],
    iou_thresh: f64,
) -> Result<()> {
    if objects.is_empty() {
        return Err(arg_err("fit_anchor_3d_stats", "empty label set"));
    }
    let mean = |sel: &mut dyn Iterator<Item = &AnchorStats>| {
        let mut acc = [0.0; 5];
        let mut n = 0usize;
        for s in sel {
            for (a, v) in acc.iter_mut().zip([s.z, s.w, s.h, s.l, s.alpha]) {
                *a += v;
            }
            n += 1;
        }
        (n > 0).then(|| {
            let k = n as f64;
            AnchorStats {
                z: acc[0] / k,
                w: acc[1] / k,
                h: acc[2] / k,
                l: acc[3] / k,
                alpha: acc[4] / k,
            }
        })
    };
    // Sort by value so the sums do not depend on label order.
    let mut sorted: Vec<&StatsSample> = objects.iter().collect();
    sorted.sort_by(|a, b| {
        let ka = [
            a.stats.z,
            a.stats.w,
            a.stats.h,
            a.stats.l,
            a.stats.alpha,
            a.box2d.width(),
            a.box2d.height(),
        ];
        let kb = [
            b.stats.z,
            b.stats.w,
            b.stats.h,
            b.stats.l,
            b.stats.alpha,
            b.box2d.width(),
            b.box2d.height(),
        ];
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let global = mean(&mut sorted.iter().map(|o| &o.stats)).expect("non-empty");
    for t in templates.iter_mut() {
        let mut matched = sorted
            .iter()
            .filter(|o| shape_iou(t.w, t.h, o.box2d.width(), o.box2d.height()) >= iou_thresh)
            .map(|o| &o.stats);
        t.stats = mean(&mut matched).unwrap_or(global);
    }
    Ok(())
}

/// Network regression targets for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDeltas {
    /// `t_x, t_y, t_w, t_h`
    pub d2: [f64; 4],
    /// `t_x, t_y, t_z, t_w, t_h, t_l, t_α`
    pub d3: [f64; 7],
}

/// 3D box in projected form: image-plane centre, depth, size, observation angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    pub xp: f64,
    pub yp: f64,
    pub zp: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub alpha: f64,
}

impl ProjectedBox {
    pub fn from_box3d(b: &Box3D, k: &CameraIntrinsics) -> Result<Self> {
        let [xp, yp, zp] = k.project(b.center())?;
        Ok(Self {
            xp,
            yp,
            zp,
            w: b.w,
            h: b.h,
            l: b.l,
            alpha: b.alpha(),
        })
    }

    /// Back-projects the centre and converts the observation angle to yaw.
    pub fn to_box3d(&self, k: &CameraIntrinsics) -> Result<Box3D> {
        let c = k.backproject([self.xp, self.yp, self.zp])?;
        Box3D::from_center(
            c,
            [self.w, self.h, self.l],
            alpha_to_yaw(self.alpha, c[0], c[2]),
        )
    }
}

pub fn decode(a: &Anchor, d: &BoxDeltas) -> (Box2D, ProjectedBox) {
    let [tx, ty, tw, th] = d.d2;
    let b2 = Box2D::from_center(
        tx * a.w + a.x,
        ty * a.h + a.y,
        tw.exp() * a.w,
        th.exp() * a.h,
    );
    let [px, py, pz, pw, ph, pl, pa] = d.d3;
    let s = &a.stats;
    let p = ProjectedBox {
        xp: px * a.w + a.x,
        yp: py * a.h + a.y,
        zp: pz + s.z,
        w: pw.exp() * s.w,
        h: ph.exp() * s.h,
        l: pl.exp() * s.l,
        alpha: wrap_angle(pa + s.alpha),
    };
    (b2, p)
}

pub fn encode(a: &Anchor, gt2: &Box2D, gt3: &ProjectedBox) -> Result<BoxDeltas> {
    let (gw, gh) = (gt2.width(), gt2.height());
    if !(gw > 0.0 && gh > 0.0 && gt3.w > 0.0 && gt3.h > 0.0 && gt3.l > 0.0) {
        return Err(Error::InvalidArgument {
            op: "encode",
            detail: "ground-truth sizes must be positive".into(),
        });
    }
    let s = &a.stats;
    if !(s.w > 0.0 && s.h > 0.0 && s.l > 0.0) {
        return Err(arg_err("encode", "anchor statistics not fitted"));
    }
    let (cx, cy) = gt2.center();
    Ok(BoxDeltas {
        d2: [
            (cx - a.x) / a.w,
            (cy - a.y) / a.h,
            (gw / a.w).ln(),
            (gh / a.h).ln(),
        ],
        d3: [
            (gt3.xp - a.x) / a.w,
            (gt3.yp - a.y) / a.h,
            gt3.zp - s.z,
            (gt3.w / s.w).ln(),
            (gt3.h / s.h).ln(),
            (gt3.l / s.l).ln(),
            wrap_angle(gt3.alpha - s.alpha),
        ],
    })
}

const TABLE_HEADER: &str = "# w2d h2d z w3d h3d l3d alpha";

/// One template per line, shortest round-trip decimal form.
pub fn write_stats_table(templates: &[AnchorTemplate]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for t in templates {
        let st = &t.stats;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            t.w, t.h, st.z, st.w, st.h, st.l, st.alpha
        );
    }
    s
}

pub fn parse_stats_table(text: &str) -> Result<Vec<AnchorTemplate>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    detail: format!("field {} is not a number: {f:?}", j + 1),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 7 {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("expected 7 fields, found {}", vals.len()),
            });
        }
        out.push(AnchorTemplate {
            w: vals[0],
            h: vals[1],
            stats: AnchorStats {
                z: vals[2],
                w: vals[3],
                h: vals[4],
                l: vals[5],
                alpha: vals[6],
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fitted_anchor() -> Anchor {
        let t = AnchorTemplate {
            w: 24.0,
            h: 36.0,
            stats: AnchorStats {
                z: 20.0,
                w: 1.6,
                h: 1.5,
                l: 3.9,
                alpha: 0.2,
            },
        };
        Anchor::at(100.0, 60.0, 0, &t)
    }

    #[test]
    fn size_endpoints_and_second_size() {
        let s = default_sizes();
        assert_eq!(s.len(), 12);
        assert_eq!(s[0], 24.0);
        assert_eq!(s[11], 288.0);
        // 24·12^(1/11)
        assert!((s[1] - 30.082_825_721_354_16).abs() < 1e-12);
    }

    #[test]
    fn thirty_six_per_position() {
        let g = generate_anchor_grid((2, 3), 8, &default_sizes(), &DEFAULT_RATIOS).unwrap();
        assert_eq!(g.len(), 2 * 3 * 36);
        assert_eq!((g[36].x, g[36].y), (12.0, 4.0));
    }

    #[test]
    fn zero_deltas_give_the_anchor() {
        let a = fitted_anchor();
        let (b, p) = decode(&a, &BoxDeltas::default());
        assert_eq!(b, a.box2d());
        assert_eq!(
            (p.xp, p.yp, p.zp, p.w, p.h, p.l, p.alpha),
            (100.0, 60.0, 20.0, 1.6, 1.5, 3.9, 0.2)
        );
    }

    #[test]
    fn log_two_doubles_width() {
        let a = fitted_anchor();
        let d = BoxDeltas {
            d2: [0.0, 0.0, 2f64.ln(), 0.0],
            ..Default::default()
        };
        let (b, _) = decode(&a, &d);
        assert!((b.width() - 48.0).abs() < 1e-12);
        let e = encode(&a, &b, &decode(&a, &d).1).unwrap();
        assert!((e.d2[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate_truth() {
        let a = fitted_anchor();
        let (b, mut p) = decode(&a, &BoxDeltas::default());
        p.l = 0.0;
        assert!(encode(&a, &b, &p).is_err());
    }

    #[test]
    fn stats_single_and_pair() {
        let mut t = make_templates(&[30.0], &[1.0]).unwrap();
        let obj = |z| StatsSample {
            box2d: Box2D::from_center(0.0, 0.0, 30.0, 30.0),
            stats: AnchorStats {
                z,
                w: 1.0,
                h: 2.0,
                l: 3.0,
                alpha: 0.0,
            },
        };
        fit_anchor_3d_stats(&mut t, &[obj(10.0)], 0.5).unwrap();
        assert_eq!(t[0].stats.z, 10.0);
        fit_anchor_3d_stats(&mut t, &[obj(10.0), obj(30.0)], 0.5).unwrap();
        assert_eq!(t[0].stats.z, 20.0);
        assert!(fit_anchor_3d_stats(&mut t, &[], 0.5).is_err());
    }

    #[test]
    fn unmatched_template_gets_global_mean() {
        let mut t = make_templates(&[30.0, 300.0], &[1.0]).unwrap();
        let o = StatsSample {
            box2d: Box2D::from_center(0.0, 0.0, 30.0, 30.0),
            stats: AnchorStats {
                z: 7.0,
                w: 1.0,
                h: 1.0,
                l: 1.0,
                alpha: 0.5,
            },
        };
        fit_anchor_3d_stats(&mut t, &[o], 0.5).unwrap();
        assert_eq!(t[1].stats, o.stats);
    }

    #[test]
    fn table_round_trip() {
        let mut t = default_templates();
        t[3].stats.z = 12.345678901234;
        t[3].stats.alpha = -1.0 / 3.0;
        let text = write_stats_table(&t);
        assert_eq!(parse_stats_table(&text).unwrap(), t);
        let err = parse_stats_table("1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn projected_box_round_trip() {
        let k = CameraIntrinsics::pinhole(700.0, 600.0, 180.0).unwrap();
        let b = Box3D::new([2.0, 1.6, 18.0], [1.6, 1.5, 3.9], -0.6).unwrap();
        let p = ProjectedBox::from_box3d(&b, &k).unwrap();
        let r = p.to_box3d(&k).unwrap();
        for (u, v) in [(b.x, r.x), (b.y, r.y), (b.z, r.z), (b.yaw, r.yaw)] {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
