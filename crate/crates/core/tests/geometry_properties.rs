use std::f64::consts::PI;

use mono3d::anchors::{decode, default_templates, encode, Anchor, AnchorStats, ProjectedBox};
use mono3d::geometry::{iou_2d, iou_bev, wrap_angle, Box2D, Box3D, CameraIntrinsics};
use mono3d::postproc::{nms, optimize_rotation, Detection, RotationSearch};
use proptest::prelude::*;

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::pinhole(721.5377, 609.5593, 172.854).unwrap()
}

fn box3d() -> impl Strategy<Value = Box3D> {
    (
        -10.0f64..10.0,
        0.5f64..2.0,
        5.0f64..50.0,
        0.4f64..2.5,
        0.8f64..2.5,
        0.5f64..5.0,
        -PI..PI,
    )
        .prop_map(|(x, y, z, w, h, l, yaw)| Box3D::new([x, y, z], [w, h, l], yaw).unwrap())
}

fn box2d() -> impl Strategy<Value = Box2D> {
    (0.0f64..600.0, 0.0f64..300.0, 2.0f64..200.0, 2.0f64..150.0)
        .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h).unwrap())
}

/// Rotates the ground plane by `t` about the camera y axis, then shifts it.
fn rigid(b: &Box3D, t: f64, dx: f64, dz: f64) -> Box3D {
    let (s, c) = t.sin_cos();
    Box3D {
        x: c * b.x + s * b.z + dx,
        z: -s * b.x + c * b.z + dz,
        yaw: b.yaw + t,
        ..*b
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trips(
        tpl in 0usize..36, ax in 0.0f64..1200.0, ay in 0.0f64..370.0,
        gt in box2d(), xp in 0.0f64..1200.0, yp in 0.0f64..370.0, zp in 3.0f64..60.0,
        dims in (0.3f64..3.0, 0.5f64..3.0, 0.3f64..6.0), alpha in -PI..PI,
    ) {
        let mut t = default_templates()[tpl];
        t.stats = AnchorStats { z: 20.0, w: 1.6, h: 1.5, l: 3.9, alpha: 0.3 };
        let a = Anchor::at(ax, ay, tpl, &t);
        let p = ProjectedBox { xp, yp, zp, w: dims.0, h: dims.1, l: dims.2, alpha };
        let (b2, b3) = decode(&a, &encode(&a, &gt, &p).unwrap());
        prop_assert!(b2.l1_distance(&gt) < 1e-9);
        for (u, v) in [(b3.xp, xp), (b3.yp, yp), (b3.zp, zp), (b3.w, dims.0), (b3.h, dims.1), (b3.l, dims.2)] {
            prop_assert!((u - v).abs() < 1e-9);
        }
        prop_assert!(wrap_angle(b3.alpha - alpha).abs() < 1e-9);
    }

    #[test]
    fn bev_iou_is_symmetric_and_bounded(a in box3d(), b in box3d()) {
        let (ab, ba) = (iou_bev(&a, &b), iou_bev(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bev_iou_survives_rigid_motion(a in box3d(), near in (-1.5f64..1.5, -1.5f64..1.5, -1.0f64..1.0), t in -PI..PI, dx in -20.0f64..20.0, dz in -20.0f64..20.0) {
        // keep the pair overlapping often enough to be interesting
        let b = Box3D { x: a.x + near.0, z: a.z + near.1, yaw: a.yaw + near.2, ..a };
        let before = iou_bev(&a, &b);
        let after = iou_bev(&rigid(&a, t, dx, dz), &rigid(&b, t, dx, dz));
        prop_assert!((before - after).abs() < 1e-9, "{} vs {}", before, after);
    }

    #[test]
    fn nms_is_idempotent(boxes in prop::collection::vec((box2d(), 0.0f64..1.0, 0usize..2), 0..25), thr in 0.1f64..0.9) {
        let b3 = Box3D::new([0.0, 1.0, 10.0], [1.6, 1.5, 3.9], 0.0).unwrap();
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|&(box2d, score, class)| Detection { class, score, box2d, box3d: b3, alpha: 0.0 })
            .collect();
        let once = nms(&dets, thr);
        prop_assert_eq!(nms(&once, thr), once.clone());
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(a.class != b.class || iou_2d(&a.box2d, &b.box2d) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
    }

    #[test]
    fn rotation_search_never_worsens(b in box3d(), shift in -1.0f64..1.0) {
        let k = camera();
        let target = mono3d::geometry::project_box(&b, &k).unwrap();
        let start = Box3D { yaw: b.yaw + shift, ..b };
        let det = Detection { class: 0, score: 0.9, box2d: target, box3d: start, alpha: start.alpha() };
        let r = optimize_rotation(&det, &k, &RotationSearch::default());
        prop_assert!(!r.behind_camera);
        prop_assert!(r.iterations <= 64);
        prop_assert_eq!(r.trace.len(), r.iterations + 1);
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(r.detection.box3d.yaw > -PI && r.detection.box3d.yaw <= PI);
    }
}
