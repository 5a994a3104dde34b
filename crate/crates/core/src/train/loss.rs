//! Static target assignment and the detection loss.

use serde::{Deserialize, Serialize};

use crate::boxes::{box_regression_loss_t, iou_t, nwd_t, BBox, Dual, LossConfig};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::model::AnchorSet;
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{CustomOp, Graph, Shape, Tensor, Var};

/// Anchors whose side ratio to a ground truth reaches this are not matched.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// One `(scale, image, anchor, cell)` slot responsible for a ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub scale: usize,
    pub batch: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub gt: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub positives: Vec<Positive>,
    /// Ground truths under 1 px on a side.
    pub skipped_small: usize,
    /// Ground truths with no anchor inside the ratio limit.
    pub unmatched: usize,
    /// Ground truths dropped because an earlier one took the same slot.
    pub collisions: usize,
}

fn anchor_ratio(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    (w / aw).max(aw / w).max(h / ah).max(ah / h)
}

/// How many slots one ground truth may claim.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assignment {
    /// Also claim the two adjacent cells nearest the box center, one per
    /// axis. The decoded offset range `[-0.5, 1.5]` reaches the center from
    /// either of them.
    pub neighbor_cells: bool,
    /// Claim every anchor under the ratio limit on every scale instead of the
    /// single best one.
    pub all_anchors: bool,
}

/// Assigns each ground truth to the single best anchor over all scales (the
/// smallest worst-side ratio, first on ties) when that ratio is below
/// [`ANCHOR_RATIO_LIMIT`], at the cell containing the box center.
pub fn assign_targets(
    gts: &[Vec<GroundTruth>],
    anchors: &AnchorSet,
    grids: &[(usize, usize)],
    strides: &[usize],
) -> Result<Targets> {
    assign_targets_with(gts, anchors, grids, strides, Assignment::default())
}

/// [`assign_targets`] widened by `assign`. A slot already taken by an earlier
/// ground truth counts one collision.
pub fn assign_targets_with(
    gts: &[Vec<GroundTruth>],
    anchors: &AnchorSet,
    grids: &[(usize, usize)],
    strides: &[usize],
    assign: Assignment,
) -> Result<Targets> {
    if grids.len() != strides.len() || grids.len() > anchors.0.len() {
        return Err(Error::invalid(
            "assign_targets",
            format!("{} grids for {} strides", grids.len(), strides.len()),
        ));
    }
    let mut t = Targets::default();
    for (batch, image) in gts.iter().enumerate() {
        for g in image {
            let b = g.bbox;
            if b.w < 1.0 || b.h < 1.0 {
                t.skipped_small += 1;
                continue;
            }
            let mut matched: Vec<(f64, usize, usize)> = Vec::new();
            for scale in 0..grids.len() {
                for anchor in 0..3 {
                    let (aw, ah) = anchors.get(scale, anchor);
                    let r = anchor_ratio(b.w, b.h, aw, ah);
                    if r >= ANCHOR_RATIO_LIMIT {
                        continue;
                    }
                    if assign.all_anchors {
                        matched.push((r, scale, anchor));
                    } else if matched.first().is_none_or(|(br, _, _)| r < *br) {
                        matched = vec![(r, scale, anchor)];
                    }
                }
            }
            if matched.is_empty() {
                t.unmatched += 1;
                continue;
            }
            for (_, scale, anchor) in matched {
                let (gh, gw) = grids[scale];
                let st = strides[scale] as f64;
                let (gx, gy) = (b.cx / st, b.cy / st);
                let col = (gx.floor().max(0.0) as usize).min(gw - 1);
                let row = (gy.floor().max(0.0) as usize).min(gh - 1);
                let mut cells = vec![(row, col)];
                if assign.neighbor_cells {
                    let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
                    if fx < 0.5 && col > 0 {
                        cells.push((row, col - 1));
                    } else if fx > 0.5 && col + 1 < gw {
                        cells.push((row, col + 1));
                    }
                    if fy < 0.5 && row > 0 {
                        cells.push((row - 1, col));
                    } else if fy > 0.5 && row + 1 < gh {
                        cells.push((row + 1, col));
                    }
                }
                for (row, col) in cells {
                    let slot = (scale, batch, anchor, row, col);
                    if t.positives.iter().any(|p| (p.scale, p.batch, p.anchor, p.row, p.col) == slot) {
                        t.collisions += 1;
                        continue;
                    }
                    t.positives.push(Positive {
                        scale,
                        batch,
                        anchor,
                        row,
                        col,
                        gt: b,
                        class_id: g.class_id,
                    });
                }
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    IouOnly,
    NwdOnly,
    #[default]
    Mixed,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou_only" => Ok(LossMode::IouOnly),
            "nwd_only" => Ok(LossMode::NwdOnly),
            "mixed" => Ok(LossMode::Mixed),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}"))),
        }
    }
}

/// Everything the loss needs besides predictions and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub mode: LossMode,
    pub iou_ratio: f64,
    pub nwd_c: f64,
    /// `(box, obj, cls)`.
    pub weights: [f64; 3],
    pub anchors: AnchorSet,
    pub strides: Vec<usize>,
    pub n_classes: usize,
    pub assign: Assignment,
}

impl LossSpec {
    /// The IoU share actually used: the two single-metric modes are the
    /// mixed loss at its end points.
    pub fn effective_ratio(&self) -> f64 {
        match self.mode {
            LossMode::IouOnly => 1.0,
            LossMode::NwdOnly => 0.0,
            LossMode::Mixed => self.iou_ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub n_pos: usize,
}

/// `max(z, 0) - z t + ln(1 + exp(-|z|))` and its derivative `sigmoid(z) - t`.
#[inline]
fn bce_logits(z: f64, t: f64) -> (f64, f64) {
    (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p(), sigmoid_scalar(z) - t)
}

/// Predicted box of one slot as a function of its four raw box logits.
fn decode_dual(raw: [f64; 4], p: &Positive, spec: &LossSpec) -> BBox<Dual<4>> {
    let st = spec.strides[p.scale] as f64;
    let (aw, ah) = spec.anchors.get(p.scale, p.anchor);
    let s = raw.map(sigmoid_scalar);
    let ds = s.map(|v| v * (1.0 - v));
    let lin = |i: usize, v: f64, slope: f64| {
        let mut d = [0.0; 4];
        d[i] = slope;
        Dual { v, d }
    };
    BBox {
        cx: lin(0, (2.0 * s[0] - 0.5 + p.col as f64) * st, 2.0 * st * ds[0]),
        cy: lin(1, (2.0 * s[1] - 0.5 + p.row as f64) * st, 2.0 * st * ds[1]),
        w: lin(2, 4.0 * s[2] * s[2] * aw, 8.0 * s[2] * ds[2] * aw),
        h: lin(3, 4.0 * s[3] * s[3] * ah, 8.0 * s[3] * ds[3] * ah),
    }
}

fn validate(raw: &[Tensor], targets: &Targets, spec: &LossSpec) -> Result<usize> {
    let na = 5 + spec.n_classes;
    if raw.len() != spec.strides.len() || raw.is_empty() {
        return Err(Error::invalid("total_loss", format!("{} maps for {} strides", raw.len(), spec.strides.len())));
    }
    let batch = raw[0].shape().n;
    for t in raw {
        let s = t.shape();
        if s.c != 3 * na || s.n != batch {
            return Err(Error::shape("total_loss", format!("map {s} needs {} channels and batch {batch}", 3 * na)));
        }
    }
    for p in &targets.positives {
        let s = raw.get(p.scale).map(Tensor::shape);
        let ok = s.is_some_and(|s| p.batch < s.n && p.row < s.h && p.col < s.w && p.anchor < 3)
            && p.class_id < spec.n_classes;
        if !ok {
            return Err(Error::invalid("total_loss", format!("positive {p:?} does not fit the predictions")));
        }
    }
    if !(spec.nwd_c > 0.0) || !(0.0..=1.0).contains(&spec.iou_ratio) {
        return Err(Error::invalid("total_loss", "needs C > 0 and iou_ratio in [0, 1]"));
    }
    Ok(na)
}

/// Loss value, its breakdown and the gradient with respect to every raw map.
///
/// `obj` is the BCE summed over every `(anchor, cell)` of every scale and
/// averaged over images, `cls` the BCE mean over positives and classes, and
/// `box` the mixed NWD/IoU regression loss over positives; the total weights
/// them by `spec.weights`.
pub fn total_loss(raw: &[Tensor], targets: &Targets, spec: &LossSpec) -> Result<(LossTerms, Vec<Tensor>)> {
    let na = validate(raw, targets, spec)?;
    let [w_box, w_obj, w_cls] = spec.weights;
    let mut grads: Vec<Tensor> = raw.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let flat = |s: Shape, b: usize, ch: usize, row: usize, col: usize| ((b * s.c + ch) * s.h + row) * s.w + col;

    let mut obj_target: Vec<Vec<f64>> = raw
        .iter()
        .map(|t| {
            let s = t.shape();
            vec![0.0; s.n * 3 * s.h * s.w]
        })
        .collect();
    for p in &targets.positives {
        let s = raw[p.scale].shape();
        obj_target[p.scale][((p.batch * 3 + p.anchor) * s.h + p.row) * s.w + p.col] = 1.0;
    }
    let n_obj = raw[0].shape().n;
    let mut obj_sum = 0.0;
    for (scale, t) in raw.iter().enumerate() {
        let s = t.shape();
        let plane = s.h * s.w;
        for b in 0..s.n {
            for a in 0..3 {
                let base = flat(s, b, a * na + 4, 0, 0);
                let tgt = &obj_target[scale][(b * 3 + a) * plane..(b * 3 + a + 1) * plane];
                let z = &t.data()[base..base + plane];
                let g = &mut grads[scale].data_mut()[base..base + plane];
                for i in 0..plane {
                    let (l, d) = bce_logits(z[i], tgt[i]);
                    obj_sum += l;
                    g[i] = w_obj * d / n_obj as f64;
                }
            }
        }
    }
    let obj = obj_sum / n_obj as f64;

    let n_pos = targets.positives.len();
    let (mut cls, mut box_loss) = (0.0, 0.0);
    if n_pos > 0 {
        let n_cls = (n_pos * spec.n_classes) as f64;
        let mut cls_sum = 0.0;
        let ratio = spec.effective_ratio();
        let cfg = LossConfig {
            c: spec.nwd_c,
            iou_ratio: ratio,
        };
        let mut pairs = Vec::with_capacity(n_pos);
        for p in &targets.positives {
            let t = &raw[p.scale];
            let s = t.shape();
            let at = |j: usize| flat(s, p.batch, p.anchor * na + j, p.row, p.col);
            for c in 0..spec.n_classes {
                let target = if c == p.class_id { 1.0 } else { 0.0 };
                let (l, d) = bce_logits(t.data()[at(5 + c)], target);
                cls_sum += l;
                grads[p.scale].data_mut()[at(5 + c)] += w_cls * d / n_cls;
            }
            let logits = [0, 1, 2, 3].map(|j| t.data()[at(j)]);
            let pred = decode_dual(logits, p, spec);
            let gt = BBox {
                cx: Dual::constant(p.gt.cx),
                cy: Dual::constant(p.gt.cy),
                w: Dual::constant(p.gt.w),
                h: Dual::constant(p.gt.h),
            };
            let one = Dual::constant(1.0);
            let iou = iou_t(&pred, &gt);
            let term = Dual::constant(1.0 - ratio) * (one - nwd_t(&pred, &gt, spec.nwd_c)) + Dual::constant(ratio) * (one - iou);
            for j in 0..4 {
                grads[p.scale].data_mut()[at(j)] += w_box * term.d[j] / n_pos as f64;
            }
            pairs.push((
                BBox {
                    cx: pred.cx.v,
                    cy: pred.cy.v,
                    w: pred.w.v,
                    h: pred.h.v,
                },
                p.gt,
                iou.v,
            ));
        }
        cls = cls_sum / n_cls;
        box_loss = box_regression_loss_t(&pairs, &cfg);
    }
    let total = w_box * box_loss + w_obj * obj + w_cls * cls;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss".into() });
    }
    Ok((
        LossTerms {
            total,
            box_loss,
            obj,
            cls,
            n_pos,
        },
        grads,
    ))
}

struct TotalLossOp {
    grads: Vec<Tensor>,
}

impl CustomOp for TotalLossOp {
    fn name(&self) -> &'static str {
        "TotalLoss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let k = grad_out.item()?;
        Ok(self
            .grads
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                Some(g)
            })
            .collect())
    }
}

/// Records [`total_loss`] on the tape as a scalar node over the raw maps.
pub fn total_loss_var(g: &mut Graph, raw: &[Var], targets: &Targets, spec: &LossSpec) -> Result<(Var, LossTerms)> {
    let values: Vec<Tensor> = raw.iter().map(|v| g.value(*v).clone()).collect();
    let (terms, grads) = total_loss(&values, targets, spec)?;
    let out = g.custom(raw, Tensor::scalar(terms.total), Box::new(TotalLossOp { grads }))?;
    Ok((out, terms))
}
