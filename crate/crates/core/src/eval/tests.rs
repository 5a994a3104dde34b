use proptest::prelude::*;

use super::*;

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h)
}

fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: bx(cx, cy, w, h),
        class_id,
        score,
    }
}

fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
    GroundTruth::new(bx(cx, cy, w, h), class_id)
}

/// For each true positive at rank i, the best precision at any rank with
/// recall at least recall_i, divided by n_gt.
fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let mut cum = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        cum.push((tp, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            let k = cum[i].0;
            let best = cum.iter().filter(|(t, _)| *t >= k).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    ap
}

#[test]
fn nms_cases() {
    let a = det(10.0, 10.0, 10.0, 10.0, 0, 0.9);
    let b = det(10.0, 10.0, 10.0, 10.0, 0, 0.8);
    assert_eq!(nms(&[b, a], 0.5).unwrap(), vec![a]);

    let far = det(100.0, 100.0, 10.0, 10.0, 0, 0.8);
    assert_eq!(nms(&[far, a], 0.5).unwrap(), vec![a, far]);

    // Shifts of 3 px between 10 px boxes give IoU 7/13; 6 px gives 4/16.
    let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
    let b = det(3.0, 0.0, 10.0, 10.0, 0, 0.8);
    let c = det(6.0, 0.0, 10.0, 10.0, 0, 0.7);
    assert_eq!(nms(&[c, b, a], 0.5).unwrap(), vec![a, c]);

    // Other classes are never suppressed.
    let other = det(10.0, 10.0, 10.0, 10.0, 1, 0.5);
    let a = det(10.0, 10.0, 10.0, 10.0, 0, 0.9);
    assert_eq!(nms(&[other, a], 0.5).unwrap().len(), 2);
    assert!(nms(&[a], 1.5).is_err());
}

#[test]
fn nms_tie_break_is_by_center() {
    let left = det(10.0, 10.0, 10.0, 10.0, 0, 0.5);
    let right = det(11.0, 10.0, 10.0, 10.0, 0, 0.5);
    assert_eq!(nms(&[right, left], 0.5).unwrap(), vec![left]);
    assert_eq!(nms(&[left, right], 0.5).unwrap(), vec![left]);
    let up = det(10.0, 9.0, 10.0, 10.0, 0, 0.5);
    assert_eq!(nms(&[left, up], 0.5).unwrap(), vec![up]);
}

#[test]
fn matching_cases() {
    let g = vec![gt(10.0, 10.0, 10.0, 10.0, 0), gt(50.0, 50.0, 10.0, 10.0, 0)];
    let d = vec![det(10.0, 10.0, 10.0, 10.0, 0, 0.9), det(50.0, 50.0, 10.0, 10.0, 0, 0.8)];
    let m = match_detections(&d, &g, 0.5);
    assert_eq!(m.tp, vec![true, true]);
    assert_eq!(m.gt_matched, vec![true, true]);

    let dup = vec![det(10.0, 10.0, 10.0, 10.0, 0, 0.9), det(10.5, 10.0, 10.0, 10.0, 0, 0.8)];
    let m = match_detections(&dup, &g[..1], 0.5);
    assert_eq!(m.tp, vec![true, false]);

    // Crossed: d1 (x=2) sees g1 at 8/12 and g2 at 9/11 and takes g2; d2
    // (x=4.5) sees g2 at 8.5/11.5 (taken) and g1 at 5.5/14.5 < 0.5.
    let g = vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(3.0, 0.0, 10.0, 10.0, 0)];
    let d = vec![det(2.0, 0.0, 10.0, 10.0, 0, 0.9), det(4.5, 0.0, 10.0, 10.0, 0, 0.8)];
    let m = match_detections(&d, &g, 0.5);
    assert_eq!(m.matched_gt, vec![Some(1), None]);
    assert_eq!(m.gt_matched, vec![false, true]);

    let wrong_class = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9)];
    assert_eq!(match_detections(&wrong_class, &g, 0.5).tp, vec![false]);
}

#[test]
fn average_precision_cases() {
    assert_eq!(average_precision(&[true], 1), Some(1.0));
    assert_eq!(average_precision(&[true, false], 1), Some(1.0));
    assert_eq!(average_precision(&[false, true], 1), Some(0.5));
    assert_eq!(average_precision(&[], 3), Some(0.0));
    assert_eq!(average_precision(&[], 0), None);
    assert_eq!(average_precision(&[true], 0), None);
    // TP, FP, TP over 2 gts: 0.5 * 1 + 0.5 * 2/3.
    assert!((average_precision(&[true, false, true], 2).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_predictions() {
    let gts = vec![
        vec![gt(10.0, 10.0, 6.0, 6.0, 0), gt(40.0, 40.0, 8.0, 8.0, 1)],
        vec![gt(20.0, 30.0, 5.0, 7.0, 2)],
    ];
    let preds: Vec<Vec<Detection>> = gts
        .iter()
        .map(|gs| gs.iter().map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 0.9 }).collect())
        .collect();
    let r = evaluate(&preds, &gts, 3, &EvalConfig::default()).unwrap();
    assert_eq!((r.precision, r.recall, r.map50), (1.0, 1.0, 1.0));
    for c in 0..3 {
        assert_eq!(r.confusion[c][c], 1.0);
    }
    assert!(r.confusion[3].iter().all(|&v| v == 0.0));

    let none = vec![Vec::new(); 2];
    let r = evaluate(&none, &gts, 3, &EvalConfig::default()).unwrap();
    assert_eq!((r.precision, r.recall, r.map50), (0.0, 0.0, 0.0));
    for c in 0..3 {
        assert_eq!(r.confusion[c][3], 1.0);
    }
    assert!(matches!(evaluate(&[], &[], 3, &EvalConfig::default()), Err(Error::EmptyDataset)));
}

/// Three images, two classes: one duplicate, one miss, one class mix-up.
///
/// Class 0 has gts g1, g3, g4 and ranked detections [TP .9, FP(dup) .8], so
/// AP = 1/3. Class 1 has gt g2 and detections [TP .7, FP .6], so AP = 1.
/// TP = 2, FP = 2, 4 gts. The class-agnostic confusion pass sends d1 to
/// (0,0), d2 to (bg,0), d3 to (1,1), d4 to (0,1) and misses g3 into (0,bg).
fn fixture() -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let gts = vec![
        vec![gt(20.0, 20.0, 10.0, 10.0, 0)],
        vec![gt(50.0, 50.0, 8.0, 8.0, 1), gt(10.0, 40.0, 6.0, 6.0, 0)],
        vec![gt(30.0, 30.0, 10.0, 10.0, 0)],
    ];
    let preds = vec![
        vec![det(21.0, 20.0, 10.0, 10.0, 0, 0.8), det(20.0, 20.0, 10.0, 10.0, 0, 0.9)],
        vec![det(50.0, 50.0, 8.0, 8.0, 1, 0.7)],
        vec![det(30.0, 30.0, 10.0, 10.0, 1, 0.6)],
    ];
    (preds, gts)
}

#[test]
fn frozen_three_image_fixture() {
    let (preds, gts) = fixture();
    let cfg = EvalConfig {
        conf_thresh: 0.5,
        ..EvalConfig::default()
    };
    let r = evaluate(&preds, &gts, 2, &cfg).unwrap();
    assert_eq!((r.tp, r.fp, r.n_gt), (2, 2, 4));
    assert_eq!(r.precision, 0.5);
    assert_eq!(r.recall, 0.5);
    assert_eq!(r.per_class_ap[&0], 1.0 / 3.0);
    assert_eq!(r.per_class_ap[&1], 1.0);
    assert_eq!(r.map50, (1.0 / 3.0 + 1.0) / 2.0);
    let t = 1.0 / 3.0;
    assert_eq!(r.confusion, vec![vec![t, t, t], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    assert_eq!(r.metadata.interpolation, "all-point");

    // Raising the threshold above 0.65 drops d4 from P/R and the confusion
    // matrix, but not from AP.
    let r = evaluate(&preds, &gts, 2, &EvalConfig { conf_thresh: 0.65, ..cfg }).unwrap();
    assert_eq!((r.tp, r.fp), (2, 1));
    assert_eq!(r.map50, (1.0 / 3.0 + 1.0) / 2.0);
    assert_eq!(r.confusion[0], vec![1.0 / 3.0, 0.0, 2.0 / 3.0]);
}

#[test]
fn report_json_fields() {
    let (preds, gts) = fixture();
    let r = evaluate(&preds, &gts, 2, &EvalConfig::default()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["precision", "recall", "map50", "per_class_ap", "confusion", "metadata"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["metadata"]["iou_thresh"], 0.5);
    let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn nwd_matching_is_optional() {
    // 2 px boxes 1.5 px apart: IoU 1/7 fails, NWD exp(-1.5 / 2) passes 0.4.
    let g = vec![gt(10.0, 10.0, 2.0, 2.0, 0)];
    let d = vec![det(11.5, 10.0, 2.0, 2.0, 0, 0.9)];
    assert_eq!(match_detections(&d, &g, 0.4).tp, vec![false]);
    let m = match_with(&d, &g, 0.4, MatchMetric::Nwd { c: 2.0 }, true);
    assert_eq!(m.tp, vec![true]);
}

fn arb_dataset() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>)> {
    let g = (0.0..60.0f64, 0.0..60.0f64, 2.0..12.0f64, 2.0..12.0f64, 0..2usize)
        .prop_map(|(x, y, w, h, c)| gt(x, y, w, h, c));
    let d = (0.0..60.0f64, 0.0..60.0f64, 2.0..12.0f64, 2.0..12.0f64, 0..2usize, 0.0..1.0f64)
        .prop_map(|(x, y, w, h, c, s)| det(x, y, w, h, c, s));
    let image = (prop::collection::vec(d, 0..6), prop::collection::vec(g, 0..4));
    prop::collection::vec(image, 1..5).prop_map(|imgs| imgs.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_matches_oracle(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..4) {
        let n_gt = flags.iter().filter(|f| **f).count() + extra;
        match average_precision(&flags, n_gt) {
            None => prop_assert_eq!(n_gt, 0),
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!((ap - ap_oracle(&flags, n_gt)).abs() < 1e-12);
                let first_fp = flags.iter().position(|f| !f).unwrap_or(flags.len());
                let covers = flags[..first_fp].iter().filter(|f| **f).count() == n_gt;
                prop_assert_eq!(ap == 1.0, covers);
            }
        }
    }

    #[test]
    fn report_invariants((preds, gts) in arb_dataset(), lo in 0.0..0.5f64, hi in 0.5..1.0f64) {
        let at = |t: f64| evaluate(&preds, &gts, 2, &EvalConfig { conf_thresh: t, ..EvalConfig::default() }).unwrap();
        let (a, b) = (at(lo), at(hi));
        prop_assert!(b.recall <= a.recall);
        for r in [&a, &b] {
            for v in [r.precision, r.recall, r.map50] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for row in &r.confusion {
                let s: f64 = row.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-9);
            }
        }
        let mut p2 = preds.clone();
        let mut g2 = gts.clone();
        p2.reverse();
        g2.reverse();
        if p2.len() > 2 {
            p2.swap(0, 1);
            g2.swap(0, 1);
        }
        let c = evaluate(&p2, &g2, 2, &EvalConfig { conf_thresh: lo, ..EvalConfig::default() }).unwrap();
        prop_assert_eq!(c.to_json(), a.to_json());
    }

    #[test]
    fn nms_output_is_pairwise_separated(
        boxes in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 2.0..10.0f64, 0.0..1.0f64), 0..20),
        t in 0.1..0.9f64,
    ) {
        let dets: Vec<Detection> = boxes.iter().map(|&(x, y, s, p)| det(x, y, s, s, 0, p)).collect();
        let kept = nms(&dets, t).unwrap();
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= t);
            }
        }
        // Every dropped detection overlaps a kept one at least as highly ranked.
        for d in &dets {
            if !kept.contains(d) {
                prop_assert!(kept.iter().any(|k| detection_order(k, d).is_le() && iou(&k.bbox, &d.bbox) > t));
            }
        }
    }
}
