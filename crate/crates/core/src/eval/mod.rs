//! Detection quality: NMS, greedy matching, all-point AP, precision/recall
//! at a confidence threshold and a row-normalized confusion matrix with a
//! background row and column.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, nwd, BBox};
use crate::error::{Error, Result};
pub use crate::model::Detection;

#[cfg(test)]
mod tests;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        GroundTruth { bbox, class_id }
    }
}

/// Box similarity used for matching and suppression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchMetric {
    #[default]
    Iou,
    Nwd {
        c: f64,
    },
}

impl MatchMetric {
    pub fn similarity(&self, a: &BBox, b: &BBox) -> f64 {
        match *self {
            MatchMetric::Iou => iou(a, b),
            MatchMetric::Nwd { c } => nwd(a, b, c).unwrap_or(0.0),
        }
    }

    fn label(&self) -> String {
        match self {
            MatchMetric::Iou => "iou".into(),
            MatchMetric::Nwd { c } => format!("nwd(c={c})"),
        }
    }
}

/// Score descending, then center x and y ascending; remaining fields only
/// break exact ties so the order is total.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}

fn check_thresh(op: &'static str, name: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(op, format!("{name} {t} outside [0, 1]")));
    }
    Ok(())
}

/// Greedy per-class suppression: a detection is dropped when its IoU with a
/// kept, higher-ranked detection of the same class exceeds `iou_thresh`.
/// The result is in [`detection_order`].
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    nms_with(dets, iou_thresh, MatchMetric::Iou)
}

pub fn nms_with(dets: &[Detection], thresh: f64, metric: MatchMetric) -> Result<Vec<Detection>> {
    check_thresh("nms", "iou_thresh", thresh)?;
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && metric.similarity(&k.bbox, &d.bbox) > thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the ground truth each detection matched.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// VOC-style greedy matching. `dets` must already be in score order; each
/// detection takes the most similar unmatched ground truth of its class with
/// similarity at least `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    match_with(dets, gts, iou_thresh, MatchMetric::Iou, true)
}

fn match_with(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresh: f64,
    metric: MatchMetric,
    same_class: bool,
) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] || (same_class && g.class_id != d.class_id) {
                continue;
            }
            let s = metric.similarity(&d.bbox, &g.bbox);
            if s >= thresh && best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
        }
        matched_gt.push(best.map(|(j, _)| j));
    }
    MatchResult {
        tp: matched_gt.iter().map(Option::is_some).collect(),
        matched_gt,
        gt_matched,
    }
}

/// All-point AP: area under the monotone precision envelope as a function of
/// recall. `None` when there are no ground truths (the class is skipped).
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub metric: MatchMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_thresh: 0.25,
            iou_thresh: 0.5,
            metric: MatchMetric::Iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub interpolation: String,
    pub matching: String,
    pub n_images: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    /// Classes with at least one ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// `(K + 1) x (K + 1)`, row-major; rows are actual classes, columns
    /// predicted ones, the last row and column are background.
    pub confusion: Vec<Vec<f64>>,
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates per-image predictions against per-image ground truths.
///
/// AP uses every detection regardless of `conf_thresh`; precision, recall and
/// the confusion matrix use detections with `score >= conf_thresh`. The
/// confusion matrix matches class-agnostically so that class mix-ups land off
/// the diagonal; unmatched ground truths go to the background column and
/// unmatched detections to the background row.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    n_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} prediction lists for {} images", preds.len(), gts.len()),
        ));
    }
    check_thresh("evaluate", "conf_thresh", cfg.conf_thresh)?;
    check_thresh("evaluate", "iou_thresh", cfg.iou_thresh)?;
    for (i, (ds, gs)) in preds.iter().zip(gts).enumerate() {
        let bad_det = ds.iter().find(|d| d.class_id >= n_classes).map(|d| d.class_id);
        let bad_gt = gs.iter().find(|g| g.class_id >= n_classes).map(|g| g.class_id);
        if let Some(c) = bad_det.or(bad_gt) {
            return Err(Error::invalid("evaluate", format!("image {i}: class {c} outside 0..{n_classes}")));
        }
    }

    let bg = n_classes;
    let mut counts = vec![vec![0usize; n_classes + 1]; n_classes + 1];
    let mut scored: Vec<Vec<(Detection, bool)>> = vec![Vec::new(); n_classes];
    let mut n_gt_class = vec![0usize; n_classes];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (ds, gs) in preds.iter().zip(gts) {
        let mut ds = ds.clone();
        ds.sort_by(detection_order);
        for g in gs {
            n_gt_class[g.class_id] += 1;
        }
        let m = match_with(&ds, gs, cfg.iou_thresh, cfg.metric, true);
        for (d, &is_tp) in ds.iter().zip(&m.tp) {
            scored[d.class_id].push((*d, is_tp));
            if d.score >= cfg.conf_thresh {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let confident: Vec<Detection> = ds.iter().filter(|d| d.score >= cfg.conf_thresh).copied().collect();
        let cm = match_with(&confident, gs, cfg.iou_thresh, cfg.metric, false);
        for (d, j) in confident.iter().zip(&cm.matched_gt) {
            match j {
                Some(j) => counts[gs[*j].class_id][d.class_id] += 1,
                None => counts[bg][d.class_id] += 1,
            }
        }
        for (g, &hit) in gs.iter().zip(&cm.gt_matched) {
            if !hit {
                counts[g.class_id][bg] += 1;
            }
        }
    }

    let mut per_class_ap = BTreeMap::new();
    for (c, mut list) in scored.into_iter().enumerate() {
        // Exact ties across images rank false positives first so the result
        // does not depend on image order.
        list.sort_by(|(a, ta), (b, tb)| detection_order(a, b).then(ta.cmp(tb)));
        let flags: Vec<bool> = list.iter().map(|(_, t)| *t).collect();
        if let Some(ap) = average_precision(&flags, n_gt_class[c]) {
            per_class_ap.insert(c, ap);
        }
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let n_gt: usize = n_gt_class.iter().sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&v| ratio(v, total)).collect()
        })
        .collect();
    Ok(EvalReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, n_gt),
        map50,
        per_class_ap,
        confusion,
        tp,
        fp,
        n_gt,
        metadata: ReportMetadata {
            conf_thresh: cfg.conf_thresh,
            iou_thresh: cfg.iou_thresh,
            interpolation: "all-point".into(),
            matching: cfg.metric.label(),
            n_images: preds.len(),
            n_classes,
        },
    })
}
