use std::collections::BTreeMap;

use mono3d::eval::{average_precision, evaluate, Difficulty, EvalConfig, RecallMode, Task};
use mono3d::kitti::{format_label, parse_label_line, LabelRecord};
use proptest::prelude::*;

fn entries() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
    (
        prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..30),
        0usize..10,
    )
        .prop_map(|(e, extra)| {
            let tp = e.iter().filter(|x| x.1).count();
            (e, tp + extra)
        })
}

fn mode() -> impl Strategy<Value = RecallMode> {
    prop_oneof![Just(RecallMode::R11), Just(RecallMode::R40)]
}

fn record() -> impl Strategy<Value = LabelRecord> {
    (
        prop_oneof![
            Just("Car"),
            Just("Pedestrian"),
            Just("Cyclist"),
            Just("Van")
        ],
        (0.0f64..1.0, -1i32..4, -3.2f64..3.2),
        (0.0f64..1000.0, 0.0f64..300.0, 1.0f64..200.0, 1.0f64..120.0),
        (0.5f64..3.0, 0.4f64..2.5, 0.5f64..5.0),
        (-20.0f64..20.0, 0.0f64..3.0, 2.0f64..70.0, -3.2f64..3.2),
        prop::option::of(0.0f64..1.0),
    )
        .prop_map(
            |(kind, (tr, occ, alpha), (x, y, w, h), dims, (lx, ly, lz, ry), score)| LabelRecord {
                kind: kind.to_string(),
                truncation: tr,
                occlusion: occ,
                alpha,
                bbox: [x, y, x + w, y + h],
                dims: [dims.0, dims.1, dims.2],
                location: [lx, ly, lz],
                rotation_y: ry,
                score,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn deleting_a_false_positive_never_lowers_ap((e, n) in entries(), m in mode(), pick in any::<prop::sample::Index>()) {
        let fps: Vec<usize> = (0..e.len()).filter(|&i| !e[i].1).collect();
        prop_assume!(!fps.is_empty());
        let drop = fps[pick.index(fps.len())];
        let mut fewer = e.clone();
        fewer.remove(drop);
        prop_assert!(average_precision(&fewer, n, m) >= average_precision(&e, n, m) - 1e-15);
    }

    #[test]
    fn duplicate_detections_never_raise_ap((e, n) in entries(), m in mode(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!e.is_empty());
        // a second box on an already matched object is a false positive
        let mut dup = e.clone();
        dup.push((e[pick.index(e.len())].0, false));
        prop_assert!(average_precision(&dup, n, m) <= average_precision(&e, n, m) + 1e-15);
    }

    #[test]
    fn ap_is_a_fraction((e, n) in entries(), m in mode()) {
        let ap = average_precision(&e, n, m);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn label_format_is_a_fixed_point(r in record()) {
        let once = format_label(&r);
        let back = parse_label_line(&once, 1).unwrap();
        prop_assert_eq!(format_label(&back), once);
    }

    #[test]
    fn difficulty_levels_are_nested(r in record()) {
        let cfg = EvalConfig::default();
        let [e, m, h] = Difficulty::ALL.map(|d| cfg.counts_at(&r, d));
        prop_assert!(!e || m);
        prop_assert!(!m || h);
    }

    #[test]
    fn evaluation_ignores_record_order(
        gt in prop::collection::vec(record(), 1..8),
        jitter in prop::collection::vec((-2.0f64..2.0, -0.3f64..0.3), 8),
        extra in prop::collection::vec(record(), 0..4),
        rot in 0usize..8,
    ) {
        // detections: perturbed copies of the ground truth plus clutter, distinct scores
        let mut det: Vec<LabelRecord> = gt
            .iter()
            .zip(&jitter)
            .map(|(g, &(d, dz))| {
                let mut r = g.clone();
                r.bbox = r.bbox.map(|v| v + d);
                r.location[2] += dz;
                r
            })
            .chain(extra)
            .collect();
        for (i, r) in det.iter_mut().enumerate() {
            r.score = Some(0.05 + 0.9 * ((i * 7 + 3) % 13) as f64 / 13.0 + 1e-4 * i as f64);
        }
        let mut shuffled = det.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let mut gt_rev = gt.clone();
        gt_rev.reverse();
        for task in [Task::TwoD, Task::Bev, Task::ThreeD] {
            let cfg = EvalConfig { task, mode: RecallMode::R40, ..EvalConfig::default() };
            let a = evaluate(&one_frame(gt.clone()), &one_frame(det.clone()), &cfg).unwrap();
            let b = evaluate(&one_frame(gt_rev.clone()), &one_frame(shuffled.clone()), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

fn one_frame(r: Vec<LabelRecord>) -> BTreeMap<String, Vec<LabelRecord>> {
    BTreeMap::from([("000000".to_string(), r)])
}
