use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Three `(w, h)` priors in pixels for each of the three scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet(pub [[[f64; 2]; 3]; 3]);

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet([
            [[4.0, 4.0], [8.0, 8.0], [12.0, 12.0]],
            [[16.0, 16.0], [24.0, 24.0], [32.0, 32.0]],
            [[40.0, 40.0], [56.0, 56.0], [72.0, 72.0]],
        ])
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        for (s, scale) in self.0.iter().enumerate() {
            if scale.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("anchors of scale {s} must be positive")));
            }
            if scale.windows(2).any(|p| p[0][0] * p[0][1] > p[1][0] * p[1][1]) {
                return Err(Error::Config(format!("anchors of scale {s} must be sorted by area")));
            }
        }
        Ok(())
    }

    pub fn get(&self, scale: usize, anchor: usize) -> (f64, f64) {
        let [w, h] = self.0[scale][anchor];
        (w, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Decodes raw head maps (one per scale, `3 * (5 + n_classes)` channels
/// laid out anchor-major) into detections per batch item:
/// `cx = (2 sig(tx) - 0.5 + col) * stride`, `w = (2 sig(tw))^2 * anchor_w`,
/// `score = sig(obj) * max sig(cls)`. Boxes are clipped to the image; boxes
/// clipped to nothing are dropped.
pub fn decode(
    raw: &[Tensor],
    anchors: &AnchorSet,
    strides: &[usize],
    n_classes: usize,
    conf_thresh: f64,
    image: (f64, f64),
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&conf_thresh) {
        return Err(Error::invalid("decode", format!("conf_thresh {conf_thresh} outside [0, 1]")));
    }
    if raw.len() != strides.len() || raw.len() > 3 {
        return Err(Error::invalid("decode", format!("{} maps for {} strides", raw.len(), strides.len())));
    }
    let na = 5 + n_classes;
    let batch = raw.first().map_or(0, |t| t.shape().n);
    let mut out = vec![Vec::new(); batch];
    for (scale, (t, &stride)) in raw.iter().zip(strides).enumerate() {
        let s = t.shape();
        if s.c != 3 * na || s.n != batch {
            return Err(Error::shape("decode", format!("map {s} needs {} channels", 3 * na)));
        }
        let st = stride as f64;
        for (n, dets) in out.iter_mut().enumerate() {
            for a in 0..3 {
                let (aw, ah) = anchors.get(scale, a);
                for row in 0..s.h {
                    for col in 0..s.w {
                        let v = |j: usize| t.at(n, a * na + j, row, col);
                        let obj = sigmoid_scalar(v(4));
                        let (mut best, mut cls) = (f64::NEG_INFINITY, 0);
                        for j in 0..n_classes {
                            if v(5 + j) > best {
                                best = v(5 + j);
                                cls = j;
                            }
                        }
                        let score = obj * sigmoid_scalar(best);
                        if score < conf_thresh {
                            continue;
                        }
                        let cx = (2.0 * sigmoid_scalar(v(0)) - 0.5 + col as f64) * st;
                        let cy = (2.0 * sigmoid_scalar(v(1)) - 0.5 + row as f64) * st;
                        let w = (2.0 * sigmoid_scalar(v(2))).powi(2) * aw;
                        let h = (2.0 * sigmoid_scalar(v(3))).powi(2) * ah;
                        let bbox = BBox::new(cx, cy, w, h).clamp_to(image.0, image.1);
                        if bbox.w > 0.0 && bbox.h > 0.0 {
                            dets.push(Detection {
                                bbox,
                                class_id: cls,
                                score,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
