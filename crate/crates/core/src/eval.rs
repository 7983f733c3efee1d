//! Average precision with KITTI difficulty buckets, plus depth-error
//! breakdowns.

use std::collections::BTreeMap;

use crate::error::{arg_err, Result};
use crate::geometry::{iou_2d, iou_3d, iou_bev, Box2D};
use crate::kitti::{LabelRecord, CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    TwoD,
    Bev,
    ThreeD,
}

impl std::str::FromStr for Task {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Task::TwoD),
            "bev" => Ok(Task::Bev),
            "3d" => Ok(Task::ThreeD),
            _ => Err(arg_err(
                "Task",
                format!("unknown task {s:?} (expected 2d, bev or 3d)"),
            )),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::TwoD => "2d",
            Task::Bev => "bev",
            Task::ThreeD => "3d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecallMode {
    /// Recall points 0, 0.1, …, 1.
    R11,
    /// Recall points 1/40, …, 1.
    R40,
}

impl RecallMode {
    /// Recall points as `(numerator, denominator)` pairs.
    pub fn points(self) -> Vec<(usize, usize)> {
        match self {
            RecallMode::R11 => (0..=10).map(|i| (i, 10)).collect(),
            RecallMode::R40 => (1..=40).map(|i| (i, 40)).collect(),
        }
    }
}

impl std::str::FromStr for RecallMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r11" => Ok(RecallMode::R11),
            "r40" => Ok(RecallMode::R40),
            _ => Err(arg_err(
                "RecallMode",
                format!("unknown mode {s:?} (expected r11 or r40)"),
            )),
        }
    }
}

impl std::fmt::Display for RecallMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecallMode::R11 => "r11",
            RecallMode::R40 => "r40",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyBucket {
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyBucket {
    pub fn admits(&self, height_px: f64, occlusion: i32, truncation: f64) -> bool {
        height_px >= self.min_height
            && occlusion <= self.max_occlusion
            && truncation <= self.max_truncation
    }
}

/// Tightest bucket a ground truth falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub task: Task,
    pub mode: RecallMode,
    /// Per class in [`CLASSES`] order.
    pub iou_thresholds: [f64; 3],
    /// Easy, moderate, hard.
    pub buckets: [DifficultyBucket; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: Task::ThreeD,
            mode: RecallMode::R40,
            iou_thresholds: [0.7, 0.5, 0.5],
            buckets: [
                DifficultyBucket {
                    min_height: 40.0,
                    max_occlusion: 0,
                    max_truncation: 0.15,
                },
                DifficultyBucket {
                    min_height: 25.0,
                    max_occlusion: 1,
                    max_truncation: 0.30,
                },
                DifficultyBucket {
                    min_height: 25.0,
                    max_occlusion: 2,
                    max_truncation: 0.50,
                },
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(arg_err("EvalConfig", "IoU thresholds must lie in (0, 1]"));
        }
        let [e, m, h] = &self.buckets;
        let relaxes = |a: &DifficultyBucket, b: &DifficultyBucket| {
            b.min_height <= a.min_height
                && b.max_occlusion >= a.max_occlusion
                && b.max_truncation >= a.max_truncation
        };
        if !(relaxes(e, m) && relaxes(m, h)) {
            return Err(arg_err(
                "EvalConfig",
                "difficulty buckets must relax from easy to hard",
            ));
        }
        Ok(())
    }

    pub fn bucket_for(&self, d: Difficulty) -> &DifficultyBucket {
        &self.buckets[d as usize]
    }

    pub fn bucket(&self, gt: &LabelRecord) -> Bucket {
        let args = (gt.height_px(), gt.occlusion, gt.truncation);
        if self.buckets[0].admits(args.0, args.1, args.2) {
            Bucket::Easy
        } else if self.buckets[1].admits(args.0, args.1, args.2) {
            Bucket::Moderate
        } else if self.buckets[2].admits(args.0, args.1, args.2) {
            Bucket::Hard
        } else {
            Bucket::Ignored
        }
    }

    /// Whether `gt` counts at evaluation level `d`.
    pub fn counts_at(&self, gt: &LabelRecord, d: Difficulty) -> bool {
        self.bucket_for(d)
            .admits(gt.height_px(), gt.occlusion, gt.truncation)
    }
}

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetStatus {
    TruePositive {
        gt: usize,
    },
    FalsePositive,
    /// Overlaps an ignored region; neither rewarded nor punished.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub status: Vec<DetStatus>,
    /// Cared-for ground truths left unmatched.
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.status
            .iter()
            .filter(|s| matches!(s, DetStatus::TruePositive { .. }))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == DetStatus::FalsePositive)
            .count()
    }
}

/// Greedy matching in descending score order (lower index first on ties).
/// Each detection takes the highest-IoU unmatched cared-for ground truth at
/// or above `thresh`; failing that, a detection overlapping an ignored
/// ground truth at or above `thresh` is ignored; otherwise it is a false
/// positive.
pub fn match_detections(
    scores: &[f64],
    gt_ignored: &[bool],
    iou: impl Fn(usize, usize) -> f64,
    thresh: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken = vec![false; gt_ignored.len()];
    let mut status = vec![DetStatus::FalsePositive; scores.len()];
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        let mut hits_ignored = false;
        for g in 0..gt_ignored.len() {
            let v = iou(d, g);
            if v < thresh {
                continue;
            }
            if gt_ignored[g] {
                hits_ignored = true;
            } else if !taken[g] && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        status[d] = match best {
            Some((_, g)) => {
                taken[g] = true;
                DetStatus::TruePositive { gt: g }
            }
            None if hits_ignored => DetStatus::Ignored,
            None => DetStatus::FalsePositive,
        };
    }
    let false_negatives = (0..gt_ignored.len())
        .filter(|&g| !gt_ignored[g] && !taken[g])
        .count();
    MatchResult {
        status,
        false_negatives,
    }
}

/// Interpolated AP from `(score, is_true_positive)` entries against
/// `num_gt` ground truths. Zero when there is nothing to find.
pub fn average_precision(entries: &[(f64, bool)], num_gt: usize, mode: RecallMode) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0).then(a.cmp(&b)));
    // (tp count, precision) at every cut-off
    let mut curve = Vec::with_capacity(entries.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if entries[i].1 {
            tp += 1;
        }
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    // max precision over cut-offs with recall >= r, scanning from the tail
    let mut tail_max = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        tail_max[k] = tail_max[k + 1].max(curve[k].1);
    }
    let points = mode.points();
    let mut sum = 0.0;
    for &(num, den) in &points {
        // first cut-off reaching recall num/den; tp counts only grow
        let first = curve.iter().position(|&(t, _)| t * den >= num * num_gt);
        if let Some(k) = first {
            sum += tail_max[k];
        }
    }
    sum / points.len() as f64
}

/// Ground-truth role for one class at one difficulty.
fn gt_role(gt: &LabelRecord, class: usize, d: Difficulty, cfg: &EvalConfig) -> Option<bool> {
    let name = CLASSES[class];
    let neighbour = matches!(
        (name, gt.kind.as_str()),
        ("Car", "Van") | ("Pedestrian", "Person_sitting")
    );
    if gt.kind == name {
        Some(!cfg.counts_at(gt, d))
    } else if neighbour || gt.is_dont_care() {
        Some(true)
    } else {
        None
    }
}

fn task_iou(task: Task, det: &LabelRecord, gt: &LabelRecord) -> f64 {
    let (Ok(d2), Ok(g2)) = (det.box2d(), gt.box2d()) else {
        return 0.0;
    };
    if gt.is_dont_care() {
        // share of the detection covered by the region
        let iw = (d2.x2.min(g2.x2) - d2.x1.max(g2.x1)).max(0.0);
        let ih = (d2.y2.min(g2.y2) - d2.y1.max(g2.y1)).max(0.0);
        let a = d2.area();
        return if a > 0.0 { iw * ih / a } else { 0.0 };
    }
    match task {
        Task::TwoD => iou_2d(&d2, &g2),
        Task::Bev | Task::ThreeD => match (det.box3d(), gt.box3d()) {
            (Ok(a), Ok(b)) if task == Task::Bev => iou_bev(&a, &b),
            (Ok(a), Ok(b)) => iou_3d(&a, &b),
            _ => 0.0,
        },
    }
}

/// Scored entries and the number of cared-for ground truths of one class
/// at one difficulty, accumulated over frames.
pub fn collect_entries(
    gt: &BTreeMap<String, Vec<LabelRecord>>,
    det: &BTreeMap<String, Vec<LabelRecord>>,
    class: usize,
    d: Difficulty,
    cfg: &EvalConfig,
) -> (Vec<(f64, bool)>, usize) {
    let empty = Vec::new();
    let mut entries = Vec::new();
    let mut num_gt = 0;
    let frames: std::collections::BTreeSet<&String> = gt.keys().chain(det.keys()).collect();
    for id in frames {
        let gts = gt.get(id).unwrap_or(&empty);
        let dets: Vec<&LabelRecord> = det
            .get(id)
            .unwrap_or(&empty)
            .iter()
            .filter(|r| r.kind == CLASSES[class])
            .collect();
        let roles: Vec<(usize, bool)> = gts
            .iter()
            .enumerate()
            .filter_map(|(i, g)| gt_role(g, class, d, cfg).map(|ign| (i, ign)))
            .collect();
        let ignored: Vec<bool> = roles.iter().map(|r| r.1).collect();
        num_gt += ignored.iter().filter(|i| !**i).count();
        let min_h = cfg.bucket_for(d).min_height;
        let scores: Vec<f64> = dets.iter().map(|r| r.score.unwrap_or(1.0)).collect();
        let m = match_detections(
            &scores,
            &ignored,
            |di, gi| task_iou(cfg.task, dets[di], &gts[roles[gi].0]),
            cfg.iou_thresholds[class],
        );
        for (i, s) in m.status.iter().enumerate() {
            match s {
                DetStatus::TruePositive { .. } => entries.push((scores[i], true)),
                // detections too small for this level are not counted against it
                DetStatus::FalsePositive if dets[i].height_px() >= min_h => {
                    entries.push((scores[i], false))
                }
                _ => {}
            }
        }
    }
    (entries, num_gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub class: &'static str,
    pub difficulty: Difficulty,
    pub ap: f64,
    pub num_gt: usize,
    pub num_entries: usize,
}

/// AP for every class with at least one labelled instance, at each difficulty.
pub fn evaluate(
    gt: &BTreeMap<String, Vec<LabelRecord>>,
    det: &BTreeMap<String, Vec<LabelRecord>>,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (class, &name) in CLASSES.iter().enumerate() {
        if !gt.values().flatten().any(|g| g.kind == name) {
            continue;
        }
        for d in Difficulty::ALL {
            let (entries, num_gt) = collect_entries(gt, det, class, d, cfg);
            rows.push(EvalRow {
                class: name,
                difficulty: d,
                ap: average_precision(&entries, num_gt, cfg.mode),
                num_gt,
                num_entries: entries.len(),
            });
        }
    }
    Ok(rows)
}

/// A box with its depth, for depth-error analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub box2d: Box2D,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKey {
    /// Ground-truth depth.
    Depth,
    /// Ground-truth `(w₂d + h₂d) / 2`.
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_abs_error: f64,
    pub count: usize,
}

/// Matches detections to ground truths per frame (2D IoU ≥ 0.5, greedy in
/// the given detection order) and reports the mean `|Δz|` per bin
/// `[edges[i], edges[i+1])`. Bins with no pairs are omitted.
pub fn depth_error_report(
    frames: &[(Vec<DepthSample>, Vec<DepthSample>)],
    edges: &[f64],
    key: BinKey,
) -> Result<Vec<DepthBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(arg_err(
            "depth_error_report",
            "need at least two increasing bin edges",
        ));
    }
    let nb = edges.len() - 1;
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (dets, gts) in frames {
        let mut taken = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou_2d(&d.box2d, &gt.box2d);
                if !taken[g] && v >= 0.5 && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            let Some((_, g)) = best else { continue };
            taken[g] = true;
            let gt = &gts[g];
            let k = match key {
                BinKey::Depth => gt.z,
                BinKey::Size => 0.5 * (gt.box2d.width() + gt.box2d.height()),
            };
            if let Some(b) = (0..nb).find(|&b| edges[b] <= k && k < edges[b + 1]) {
                sum[b] += (d.z - gt.z).abs();
                count[b] += 1;
            }
        }
    }
    Ok((0..nb)
        .filter(|&b| count[b] > 0)
        .map(|b| DepthBin {
            lo: edges[b],
            hi: edges[b + 1],
            mean_abs_error: sum[b] / count[b] as f64,
            count: count[b],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::parse_label_line;

    fn car(height: f64, occ: i32, trunc: f64) -> LabelRecord {
        let mut r =
            parse_label_line("Car 0 0 0 100 100 150 150 1.5 1.6 3.9 0 1.6 20 0", 1).unwrap();
        r.bbox[3] = r.bbox[1] + height;
        r.occlusion = occ;
        r.truncation = trunc;
        r
    }

    #[test]
    fn buckets() {
        let cfg = EvalConfig::default();
        assert_eq!(cfg.bucket(&car(50.0, 0, 0.0)), Bucket::Easy);
        assert_eq!(cfg.bucket(&car(30.0, 1, 0.0)), Bucket::Moderate);
        assert_eq!(cfg.bucket(&car(30.0, 2, 0.4)), Bucket::Hard);
        assert_eq!(cfg.bucket(&car(20.0, 0, 0.0)), Bucket::Ignored);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn perfect_and_empty() {
        let e = [(0.9, true), (0.8, true)];
        assert_eq!(average_precision(&e, 2, RecallMode::R11), 1.0);
        assert_eq!(average_precision(&e, 2, RecallMode::R40), 1.0);
        assert_eq!(average_precision(&[], 2, RecallMode::R40), 0.0);
        assert_eq!(average_precision(&[], 0, RecallMode::R11), 0.0);
    }

    #[test]
    fn half_recall() {
        // one of two found at precision 1: R11 has 6 points with recall <= 0.5
        let ap = average_precision(&[(0.9, true)], 2, RecallMode::R11);
        assert!((ap - 6.0 / 11.0).abs() < 1e-15);
        let ap = average_precision(&[(0.9, true)], 2, RecallMode::R40);
        assert!((ap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_det_two_identical_gts() {
        let m = match_detections(&[0.9], &[false, false], |_, _| 1.0, 0.7);
        assert_eq!(m.true_positives(), 1);
        assert_eq!(m.false_negatives, 1);
    }

    #[test]
    fn ignored_regions_absorb() {
        let m = match_detections(&[0.9, 0.8], &[true], |_, _| 0.9, 0.5);
        assert_eq!(m.status, vec![DetStatus::Ignored, DetStatus::Ignored]);
        assert_eq!(m.false_negatives, 0);
    }

    #[test]
    fn depth_report_singleton() {
        let b = Box2D::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let frames = vec![(
            vec![DepthSample { box2d: b, z: 17.0 }],
            vec![DepthSample { box2d: b, z: 15.0 }],
        )];
        let r = depth_error_report(&frames, &[10.0, 20.0], BinKey::Depth).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].mean_abs_error, 2.0);
        let r = depth_error_report(&frames, &[0.0, 5.0, 10.0], BinKey::Size).unwrap();
        assert!(r.is_empty());
        assert!(depth_error_report(&frames, &[1.0], BinKey::Depth).is_err());
    }

    #[test]
    fn identical_dirs_score_one() {
        let mut gt = BTreeMap::new();
        gt.insert(
            "000001".to_string(),
            vec![car(50.0, 0, 0.0), car(30.0, 1, 0.2)],
        );
        let mut det = gt.clone();
        for r in det.values_mut().flatten() {
            r.score = Some(0.9);
        }
        for task in [Task::TwoD, Task::Bev, Task::ThreeD] {
            let cfg = EvalConfig {
                task,
                ..Default::default()
            };
            for row in evaluate(&gt, &det, &cfg).unwrap() {
                assert_eq!(row.ap, 1.0, "{task} {:?}", row.difficulty);
            }
        }
    }
}
