//! Non-maximum suppression, confidence filtering and yaw refinement.

use crate::geometry::{
    iou_2d, project_box, wrap_angle, yaw_to_alpha, Box2D, Box3D, CameraIntrinsics,
};

pub const NMS_IOU: f64 = 0.4;
pub const MIN_CONFIDENCE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
    /// Observation angle.
    pub alpha: f64,
}

/// Indices in descending score order, lower index first on ties.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy per-class suppression on 2D IoU. A box is dropped when it overlaps
/// a kept box of its class by more than `iou_thresh`. Output is sorted by
/// descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score(dets) {
        let d = &dets[i];
        if kept
            .iter()
            .all(|&k| dets[k].class != d.class || iou_2d(&dets[k].box2d, &d.box2d) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Keeps detections scoring at least `thresh`.
pub fn confidence_filter(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= thresh).copied().collect()
}

/// NMS followed by the confidence filter.
pub fn postprocess(dets: &[Detection], iou_thresh: f64, min_score: f64) -> Vec<Detection> {
    confidence_filter(&nms(dets, iou_thresh), min_score)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSearch {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_iterations: usize,
}

impl Default for RotationSearch {
    fn default() -> Self {
        Self {
            initial_step: 0.3,
            min_step: 1e-3,
            max_iterations: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationResult {
    pub detection: Detection,
    /// Objective before the search and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Set when the box could not be projected; the detection is unchanged.
    pub behind_camera: bool,
}

/// L1 distance between the projected envelope at `yaw` and the 2D box.
pub fn rotation_objective(
    b: &Box3D,
    yaw: f64,
    target: &Box2D,
    k: &CameraIntrinsics,
) -> Option<f64> {
    project_box(&Box3D { yaw, ..*b }, k)
        .ok()
        .map(|env| env.l1_distance(target))
}

/// Coordinate search over yaw: try `±σ`, accept the better improving step,
/// halve `σ` when neither improves.
pub fn optimize_rotation(
    det: &Detection,
    k: &CameraIntrinsics,
    cfg: &RotationSearch,
) -> RotationResult {
    let unchanged = |trace| RotationResult {
        detection: *det,
        trace,
        iterations: 0,
        behind_camera: true,
    };
    let b = det.box3d;
    let Some(mut best) = rotation_objective(&b, b.yaw, &det.box2d, k) else {
        return unchanged(Vec::new());
    };
    let mut yaw = b.yaw;
    let mut sigma = cfg.initial_step;
    let mut trace = vec![best];
    let mut it = 0;
    while sigma >= cfg.min_step && it < cfg.max_iterations {
        it += 1;
        let mut step = None;
        for cand in [yaw + sigma, yaw - sigma] {
            if let Some(v) = rotation_objective(&b, cand, &det.box2d, k) {
                if v < step.map_or(best, |(_, s)| s) {
                    step = Some((cand, v));
                }
            }
        }
        match step {
            Some((y, v)) => {
                yaw = y;
                best = v;
            }
            None => sigma /= 2.0,
        }
        trace.push(best);
    }
    let yaw = wrap_angle(yaw);
    let box3d = Box3D { yaw, ..b };
    RotationResult {
        detection: Detection {
            box3d,
            alpha: yaw_to_alpha(yaw, b.x, b.z),
            ..*det
        },
        trace,
        iterations: it,
        behind_camera: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, x1: f64, class: usize) -> Detection {
        Detection {
            class,
            score,
            box2d: Box2D::new(x1, 0.0, x1 + 10.0, 10.0).unwrap(),
            box3d: Box3D::new([0.0, 1.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap(),
            alpha: 0.0,
        }
    }

    #[test]
    fn identical_boxes_keep_the_best() {
        let out = nms(&[det(0.8, 0.0, 0), det(0.9, 0.0, 0)], NMS_IOU);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(nms(&[det(0.5, 0.0, 0)], NMS_IOU).len(), 1);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let out = nms(&[det(0.8, 0.0, 0), det(0.9, 0.0, 1)], NMS_IOU);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn confidence_boundary() {
        let out = confidence_filter(&[det(0.75, 0.0, 0), det(0.7499, 0.0, 0)], MIN_CONFIDENCE);
        assert_eq!(out.len(), 1);
        assert!(confidence_filter(&[], MIN_CONFIDENCE).is_empty());
    }

    #[test]
    fn already_optimal_yaw_is_kept() {
        let k = CameraIntrinsics::pinhole(700.0, 600.0, 180.0).unwrap();
        let b = Box3D::new([1.0, 1.6, 15.0], [1.6, 1.5, 3.9], 0.5).unwrap();
        let d = Detection {
            class: 0,
            score: 1.0,
            box2d: project_box(&b, &k).unwrap(),
            box3d: b,
            alpha: b.alpha(),
        };
        let r = optimize_rotation(&d, &k, &RotationSearch::default());
        assert_eq!(r.detection.box3d.yaw, 0.5);
        assert!(r.trace.iter().all(|&v| v == 0.0));
        assert!(r.iterations <= 64);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let k = CameraIntrinsics::pinhole(700.0, 600.0, 180.0).unwrap();
        let b = Box3D::new([0.0, 1.0, 0.5], [1.6, 1.5, 3.9], 0.0).unwrap();
        let d = Detection {
            class: 0,
            score: 1.0,
            box2d: Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            box3d: b,
            alpha: 0.0,
        };
        let r = optimize_rotation(&d, &k, &RotationSearch::default());
        assert!(r.behind_camera);
        assert_eq!(r.detection, d);
    }
}
