//! Detection losses, anchor assignment and hard-negative mining.
//!
//! `L = L_cls + λ₁·L_2d + λ₂·L_3d` with cross-entropy classification,
//! `−ln IoU` for 2D boxes and smooth-L1 over the seven 3D deltas.

use crate::anchors::Anchor;
use crate::error::{arg_err, Result};
use crate::geometry::{iou_2d, Box2D};
pub use crate::graph::{smooth_l1, IOU_LOSS_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    /// Share of negatives kept by hard-negative mining.
    pub hard_negative_fraction: f64,
    /// Anchors at or above this IoU with a ground truth are positives.
    pub positive_iou: f64,
    /// Anchors below this IoU with every ground truth are negatives.
    pub negative_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_2d: 1.0,
            lambda_3d: 1.0,
            hard_negative_fraction: 0.2,
            positive_iou: 0.5,
            negative_iou: 0.4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_2d >= 0.0 && self.lambda_3d >= 0.0) {
            return Err(arg_err("LossConfig", "loss weights must be non-negative"));
        }
        if !(self.hard_negative_fraction > 0.0 && self.hard_negative_fraction <= 1.0) {
            return Err(arg_err(
                "LossConfig",
                "hard-negative fraction must lie in (0, 1]",
            ));
        }
        if !(self.negative_iou <= self.positive_iou
            && self.positive_iou <= 1.0
            && self.negative_iou >= 0.0)
        {
            return Err(arg_err(
                "LossConfig",
                "need 0 <= negative_iou <= positive_iou <= 1",
            ));
        }
        Ok(())
    }
}

/// `−ln softmax(row)[target]`.
pub fn cross_entropy_row(row: &[f64], target: usize) -> f64 {
    crate::graph::log_sum_exp(row) - row[target]
}

/// Mean cross-entropy over the rows of a `(n, classes)` logit matrix.
pub fn loss_cls(logits: &[f64], classes: usize, targets: &[usize]) -> Result<f64> {
    if classes == 0 || logits.len() != classes * targets.len() {
        return Err(arg_err(
            "loss_cls",
            format!("{} logits for {} targets", logits.len(), targets.len()),
        ));
    }
    if targets.iter().any(|&t| t >= classes) {
        return Err(arg_err("loss_cls", "target class out of range"));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| cross_entropy_row(&logits[i * classes..(i + 1) * classes], t))
        .sum();
    Ok(s / targets.len() as f64)
}

/// `−ln IoU`, with the IoU floored at [`IOU_LOSS_EPS`].
pub fn loss_2d(pred: &Box2D, gt: &Box2D) -> f64 {
    -iou_2d(pred, gt).max(IOU_LOSS_EPS).ln()
}

/// Σ smoothL1 over the seven 3D deltas.
pub fn loss_3d(pred: &[f64; 7], target: &[f64; 7]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1(p - t)).sum()
}

pub fn total_loss(l_cls: f64, l_2d: f64, l_3d: f64, cfg: &LossConfig) -> f64 {
    l_cls + cfg.lambda_2d * l_2d + cfg.lambda_3d * l_3d
}

/// Number of items kept when taking `fraction` of `n`, rounded up.
pub fn mined_count(n: usize, fraction: f64) -> usize {
    // tolerate products like 0.2·5 landing a hair above an integer
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `⌈fraction·n⌉` largest losses, lower index first on ties,
/// returned in ascending index order.
pub fn mine_hard(losses: &[f64], fraction: f64) -> Vec<usize> {
    let k = mined_count(losses.len(), fraction);
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Training role of an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to ground truth `gt`.
    Positive {
        gt: usize,
    },
    Negative,
    Ignore,
}

/// Assigns each anchor to its highest-IoU ground truth (lowest index on ties).
pub fn assign_anchors(anchors: &[Anchor], gts: &[Box2D], cfg: &LossConfig) -> Vec<Assignment> {
    anchors
        .iter()
        .map(|a| {
            let b = a.box2d();
            let mut best = (0.0, usize::MAX);
            for (j, g) in gts.iter().enumerate() {
                let iou = iou_2d(&b, g);
                if iou > best.0 {
                    best = (iou, j);
                }
            }
            if best.1 != usize::MAX && best.0 >= cfg.positive_iou {
                Assignment::Positive { gt: best.1 }
            } else if best.0 < cfg.negative_iou {
                Assignment::Negative
            } else {
                Assignment::Ignore
            }
        })
        .collect()
}

/// All positives plus the hardest `fraction` of negatives by classification
/// loss, in ascending index order.
pub fn select_training_samples(
    cls_losses: &[f64],
    roles: &[Assignment],
    fraction: f64,
) -> Vec<usize> {
    let negatives: Vec<usize> = (0..roles.len())
        .filter(|&i| roles[i] == Assignment::Negative)
        .collect();
    let neg_losses: Vec<f64> = negatives.iter().map(|&i| cls_losses[i]).collect();
    let mut keep: Vec<usize> = mine_hard(&neg_losses, fraction)
        .into_iter()
        .map(|j| negatives[j])
        .collect();
    keep.extend((0..roles.len()).filter(|&i| matches!(roles[i], Assignment::Positive { .. })));
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{AnchorStats, AnchorTemplate};

    #[test]
    fn uniform_four_class_ce() {
        assert!((loss_cls(&[0.0; 4], 4, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(loss_cls(&[0.0, 800.0], 2, &[1]).unwrap() < 1e-300);
        assert!(loss_cls(&[0.0; 3], 2, &[0]).is_err());
    }

    #[test]
    fn iou_loss_values() {
        let a = Box2D::new(0.0, 0.0, 2.0, 1.0).unwrap();
        let b = Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(loss_2d(&a, &a), 0.0);
        assert!((loss_2d(&a, &b) - 2f64.ln()).abs() < 1e-15);
        let far = Box2D::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert!((loss_2d(&a, &far) + IOU_LOSS_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_values() {
        let mut p = [0.0; 7];
        assert_eq!(loss_3d(&p, &p), 0.0);
        p[0] = 0.5;
        assert_eq!(loss_3d(&p, &[0.0; 7]), 0.125);
        p[0] = 2.0;
        assert_eq!(loss_3d(&p, &[0.0; 7]), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
    }

    #[test]
    fn mining_examples() {
        assert_eq!(mine_hard(&[3.0, 1.0, 2.0, 5.0, 4.0], 0.2), vec![3]);
        assert_eq!(mine_hard(&[3.0, 1.0, 2.0], 1.0), vec![0, 1, 2]);
        assert_eq!(mine_hard(&[1.0, 1.0, 1.0], 0.34), vec![0, 1]);
        assert!(mine_hard(&[], 0.2).is_empty());
    }

    #[test]
    fn weighted_total() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 6.0);
        let z = LossConfig {
            lambda_2d: 0.0,
            lambda_3d: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &z), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            hard_negative_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn positives_survive_mining() {
        let t = AnchorTemplate {
            w: 10.0,
            h: 10.0,
            stats: AnchorStats::default(),
        };
        let anchors: Vec<Anchor> = (0..6)
            .map(|i| Anchor::at(5.0 + 10.0 * i as f64, 5.0, 0, &t))
            .collect();
        let gt = [
            Box2D::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            Box2D::new(13.0, 0.0, 23.0, 10.0).unwrap(),
            Box2D::new(24.0, 0.0, 34.0, 10.0).unwrap(),
        ];
        let roles = assign_anchors(&anchors, &gt, &LossConfig::default());
        assert_eq!(roles[0], Assignment::Positive { gt: 0 });
        assert_eq!(roles[1], Assignment::Positive { gt: 1 });
        assert_eq!(roles[2], Assignment::Ignore);
        let losses = [0.0, 0.0, 9.0, 1.0, 5.0, 2.0];
        // three negatives, 20% -> 1 (anchor 4)
        assert_eq!(select_training_samples(&losses, &roles, 0.2), vec![0, 1, 4]);
    }
}
