//! Camera projection, 3D box corners, angle conversion and box overlap.
//!
//! Camera frame follows KITTI: x right, y down, z forward. A [`Box3D`]
//! location is the centre of its bottom face, so the box spans
//! `[y − h, y]` vertically.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{arg_err, Error, Result};
use crate::parallel::{map_range, Exec};

/// Intersections below this area count as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Global yaw from the observation angle: `A = α + atan2(X, Z)`.
pub fn alpha_to_yaw(alpha: f64, x: f64, z: f64) -> f64 {
    wrap_angle(alpha + x.atan2(z))
}

pub fn yaw_to_alpha(yaw: f64, x: f64, z: f64) -> f64 {
    wrap_angle(yaw - x.atan2(z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    k: Matrix3x4<f64>,
}

impl CameraIntrinsics {
    /// From 12 row-major entries.
    pub fn from_row_slice(entries: &[f64]) -> Result<Self> {
        if entries.len() != 12 {
            return Err(arg_err(
                "CameraIntrinsics",
                format!("expected 12 entries, got {}", entries.len()),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("CameraIntrinsics", "non-finite entry"));
        }
        let k = Matrix3x4::from_row_slice(entries);
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(arg_err(
                "CameraIntrinsics",
                "focal lengths must be positive",
            ));
        }
        if k.fixed_view::<3, 3>(0, 0)
            .into_owned()
            .try_inverse()
            .is_none()
        {
            return Err(arg_err("CameraIntrinsics", "left 3x3 block is singular"));
        }
        Ok(Self { k })
    }

    /// Pinhole camera with no translation column.
    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::from_row_slice(&[focal, 0.0, cx, 0.0, 0.0, focal, cy, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.k
    }

    pub fn row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.k[(r, c)];
            }
        }
        out
    }

    pub fn focal_x(&self) -> f64 {
        self.k[(0, 0)]
    }

    pub fn focal_y(&self) -> f64 {
        self.k[(1, 1)]
    }

    /// `[X_p·Z_p, Y_p·Z_p, Z_p]ᵀ = K·[X, Y, Z, 1]ᵀ`; returns `(X_p, Y_p, Z_p)`.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        if !(p[2] > 0.0) {
            return Err(Error::BehindCamera { depth: p[2] });
        }
        let h = self.k * Vector4::new(p[0], p[1], p[2], 1.0);
        if !(h[2] > 0.0) {
            return Err(Error::BehindCamera { depth: h[2] });
        }
        Ok([h[0] / h[2], h[1] / h[2], h[2]])
    }

    /// Inverse of [`project`](Self::project), including the translation column.
    pub fn backproject(&self, q: [f64; 3]) -> Result<[f64; 3]> {
        if !(q[2] > 0.0) {
            return Err(Error::BehindCamera { depth: q[2] });
        }
        let rhs = Vector3::new(q[0] * q[2], q[1] * q[2], q[2]) - self.k.column(3);
        let m: Matrix3<f64> = self.k.fixed_view::<3, 3>(0, 0).into_owned();
        let p = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| arg_err("backproject", "singular intrinsics"))?;
        Ok([p[0], p[1], p[2]])
    }
}

/// Axis-aligned image box `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x2 < x1 || y2 < y1 {
            return Err(arg_err(
                "Box2D",
                format!("invalid corners ({x1}, {y1}, {x2}, {y2})"),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Sum of absolute corner differences.
    pub fn l1_distance(&self, o: &Box2D) -> f64 {
        (self.x1 - o.x1).abs()
            + (self.y1 - o.y1).abs()
            + (self.x2 - o.x2).abs()
            + (self.y2 - o.y2).abs()
    }
}

/// Yaw-rotated cuboid; `(x, y, z)` is the bottom-face centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    /// Rotation about the camera y axis.
    pub yaw: f64,
}

impl Box3D {
    pub fn new(location: [f64; 3], dims_whl: [f64; 3], yaw: f64) -> Result<Self> {
        let [w, h, l] = dims_whl;
        if !(w > 0.0 && h > 0.0 && l > 0.0) {
            return Err(arg_err(
                "Box3D",
                format!("dimensions must be positive, got w={w} h={h} l={l}"),
            ));
        }
        if !location.iter().chain(&[yaw]).all(|v| v.is_finite()) {
            return Err(arg_err("Box3D", "non-finite location or yaw"));
        }
        Ok(Self {
            x: location[0],
            y: location[1],
            z: location[2],
            w,
            h,
            l,
            yaw,
        })
    }

    /// Box whose geometric centre is `c`.
    pub fn from_center(c: [f64; 3], dims_whl: [f64; 3], yaw: f64) -> Result<Self> {
        Self::new([c[0], c[1] + dims_whl[1] / 2.0, c[2]], dims_whl, yaw)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y - self.h / 2.0, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }

    pub fn alpha(&self) -> f64 {
        yaw_to_alpha(self.yaw, self.x, self.z)
    }

    /// Vertical extent `[top, bottom]` (y grows downwards).
    pub fn y_range(&self) -> (f64, f64) {
        (self.y - self.h, self.y)
    }

    /// Four bottom corners projected on the ground plane as `(x, z)`,
    /// counter-clockwise in that plane.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(lx, lz)| (self.x + c * lx + s * lz, self.z - s * lx + c * lz))
    }

    /// Eight corners: the bottom face first, then the top face.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let f = self.footprint();
        let mut out = [[0.0; 3]; 8];
        for (i, &(x, z)) in f.iter().enumerate() {
            out[i] = [x, self.y, z];
            out[i + 4] = [x, self.y - self.h, z];
        }
        out
    }
}

/// Image-space envelope of the eight projected corners.
pub fn project_box(b: &Box3D, k: &CameraIntrinsics) -> Result<Box2D> {
    let mut env = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for c in b.corners() {
        let [u, v, _] = k.project(c)?;
        env[0] = env[0].min(u);
        env[1] = env[1].min(v);
        env[2] = env[2].max(u);
        env[3] = env[3].max(v);
    }
    Ok(Box2D {
        x1: env[0],
        y1: env[1],
        x2: env[2],
        y2: env[3],
    })
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter < AREA_EPS {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Shoelace area, positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

fn ccw(poly: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut v = poly.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Sutherland–Hodgman clip of `subject` by the convex polygon `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let clip = ccw(clip);
    let mut out = ccw(subject);
    let side = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
    };
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(a, b, cur), side(a, b, prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Ground-plane overlap area of two yaw-rotated footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&a.footprint(), &b.footprint());
    if poly.len() < 3 {
        return 0.0;
    }
    let area = signed_area(&poly).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.w * a.l + b.w * b.l - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (at, ab) = a.y_range();
    let (bt, bb) = b.y_range();
    let overlap_y = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = bev_intersection(a, b) * overlap_y;
    if inter < AREA_EPS {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// [`iou_bev`] over many pairs.
pub fn iou_bev_many(pairs: &[(Box3D, Box3D)], exec: Exec) -> Vec<f64> {
    map_range(exec, pairs.len(), |i| iou_bev(&pairs[i].0, &pairs[i].1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k700() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(700.0, 600.0, 180.0).unwrap()
    }

    #[test]
    fn principal_ray_and_offset_point() {
        let k = k700();
        assert_eq!(k.project([0.0, 0.0, 10.0]).unwrap(), [600.0, 180.0, 10.0]);
        assert_eq!(k.project([2.0, 0.0, 10.0]).unwrap()[0], 740.0);
        assert!(matches!(
            k.project([0.0, 0.0, 0.0]),
            Err(Error::BehindCamera { .. })
        ));
        assert!(k.backproject([1.0, 1.0, -1.0]).is_err());
    }

    #[test]
    fn translation_column_round_trip() {
        let k = CameraIntrinsics::from_row_slice(&[
            721.5377,
            0.0,
            609.5593,
            44.85728,
            0.0,
            721.5377,
            172.854,
            0.2163791,
            0.0,
            0.0,
            1.0,
            0.002745884,
        ])
        .unwrap();
        let p = [-3.2, 1.6, 23.4];
        let q = k.project(p).unwrap();
        let r = k.backproject(q).unwrap();
        for i in 0..3 {
            assert!((p[i] - r[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn angles() {
        assert_eq!(alpha_to_yaw(0.3, 0.0, 5.0), 0.3);
        assert!((alpha_to_yaw(0.0, 4.0, 4.0) - PI / 4.0).abs() < 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_corners() {
        let b = Box3D::from_center([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        for c in b.corners() {
            assert_eq!(c[0].abs(), 0.5);
            assert_eq!(c[1].abs(), 0.5);
            assert_eq!((c[2] - 10.0).abs(), 0.5);
        }
    }

    #[test]
    fn half_turn_keeps_corner_set() {
        let a = Box3D::new([1.0, 1.5, 12.0], [1.6, 1.5, 3.9], 0.4).unwrap();
        let b = Box3D { yaw: 0.4 + PI, ..a };
        for ca in a.corners() {
            assert!(b
                .corners()
                .iter()
                .any(|cb| (0..3).all(|i| (ca[i] - cb[i]).abs() < 1e-12)));
        }
        assert!((iou_3d(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_2d_basic() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = Box2D::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((iou_2d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2D::new(2.0, 0.0, 3.0, 1.0).unwrap()), 0.0);
        assert!(Box2D::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rotated_square_bev() {
        let a = Box3D::new([0.0, 0.0, 5.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D { yaw: PI / 4.0, ..a };
        let inter = bev_intersection(&a, &b);
        assert!((inter - 2.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((iou_bev(&a, &b) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_have_zero_overlap() {
        let a = Box3D::new([0.0, 0.0, 5.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D { x: 1.0, ..a };
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn vertical_offset_reduces_3d_iou_only() {
        let a = Box3D::new([0.0, 2.0, 5.0], [1.0, 2.0, 1.0], 0.0).unwrap();
        let b = Box3D { y: 3.0, ..a };
        assert_eq!(iou_bev(&a, &b), 1.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_contains_projected_centre() {
        let k = k700();
        let b = Box3D::new([1.0, 1.6, 15.0], [1.6, 1.5, 3.9], 0.7).unwrap();
        let env = project_box(&b, &k).unwrap();
        let [u, v, _] = k.project(b.center()).unwrap();
        assert!(env.x1 < u && u < env.x2 && env.y1 < v && v < env.y2);
        let behind = Box3D { z: 1.0, ..b };
        assert!(project_box(&behind, &k).is_err());
    }
}
