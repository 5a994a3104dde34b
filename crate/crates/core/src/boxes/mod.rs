//! Box similarity: IoU, CIoU, Gaussian box modeling, second-order
//! Wasserstein distance (general and closed form), NWD and the NWD/IoU
//! mixed regression loss.
//!
//! Formulas are generic over [`Real`] so the same code yields values (`f64`)
//! and exact gradients ([`Dual`]).

mod real;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use real::{Dual, Real};

use crate::error::{Error, Result};

/// Axis-aligned box in center format, absolute pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f64> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> BBox<T> {
    pub fn x1(&self) -> T {
        self.cx - self.w * T::cst(0.5)
    }
    pub fn y1(&self) -> T {
        self.cy - self.h * T::cst(0.5)
    }
    pub fn x2(&self) -> T {
        self.cx + self.w * T::cst(0.5)
    }
    pub fn y2(&self) -> T {
        self.cy + self.h * T::cst(0.5)
    }
    pub fn area(&self) -> T {
        self.w * self.h
    }
}

impl BBox<f64> {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Validating constructor: finite coordinates, strictly positive size.
    pub fn checked(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox::new(cx, cy, w, h);
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid("BBox", format!("{self:?} needs finite values and w, h > 0")));
        }
        Ok(())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn scale(&self, s: f64) -> Self {
        BBox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        BBox::from_corners(x1, y1, x2, y2)
    }

    fn lift<T: Real>(&self) -> BBox<T> {
        BBox {
            cx: T::cst(self.cx),
            cy: T::cst(self.cy),
            w: T::cst(self.w),
            h: T::cst(self.h),
        }
    }
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub const fn diag(a: f64, c: f64) -> Self {
        Sym2 { a, b: 0.0, c }
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a > 0.0 && self.c > 0.0 && self.det() > 0.0 && self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }

    /// Principal square root of a positive semi-definite matrix:
    /// `sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
    pub fn sqrt(&self) -> Result<Sym2> {
        let det = self.det();
        if self.a < 0.0 || self.c < 0.0 || det < 0.0 {
            return Err(Error::invalid("Sym2::sqrt", format!("{self:?} is not positive semi-definite")));
        }
        let s = det.sqrt();
        let t = (self.trace() + 2.0 * s).sqrt();
        if t == 0.0 {
            return Ok(Sym2 { a: 0.0, b: 0.0, c: 0.0 });
        }
        Ok(Sym2 {
            a: (self.a + s) / t,
            b: self.b / t,
            c: (self.c + s) / t,
        })
    }

    /// `self * other * self`, symmetric when both factors are.
    pub fn sandwich(&self, other: &Sym2) -> Sym2 {
        // M = S O
        let m00 = self.a * other.a + self.b * other.b;
        let m01 = self.a * other.b + self.b * other.c;
        let m10 = self.b * other.a + self.c * other.b;
        let m11 = self.b * other.b + self.c * other.c;
        // M S
        Sym2 {
            a: m00 * self.a + m01 * self.b,
            b: 0.5 * ((m00 * self.b + m01 * self.c) + (m10 * self.a + m11 * self.b)),
            c: m10 * self.b + m11 * self.c,
        }
    }
}

/// 2-D Gaussian modeling a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBox {
    pub mean: [f64; 2],
    pub cov: Sym2,
}

impl GaussianBox {
    pub fn new(mean: [f64; 2], cov: Sym2) -> Result<Self> {
        if !cov.is_positive_definite() {
            return Err(Error::invalid("GaussianBox", format!("covariance {cov:?} is not positive definite")));
        }
        Ok(GaussianBox { mean, cov })
    }
}

/// Mean `(cx, cy)`, covariance `diag((w/2)^2, (h/2)^2)`.
pub fn gauss_from_box(b: &BBox) -> GaussianBox {
    GaussianBox {
        mean: [b.cx, b.cy],
        cov: Sym2::diag((b.w / 2.0).powi(2), (b.h / 2.0).powi(2)),
    }
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)`.
pub fn wasserstein2_general(p: &GaussianBox, q: &GaussianBox) -> Result<f64> {
    for g in [p, q] {
        if !g.cov.is_positive_definite() {
            return Err(Error::invalid(
                "wasserstein2_general",
                format!("covariance {:?} is not positive definite", g.cov),
            ));
        }
    }
    let dm = (p.mean[0] - q.mean[0]).powi(2) + (p.mean[1] - q.mean[1]).powi(2);
    let root_q = q.cov.sqrt()?;
    let cross = root_q.sandwich(&p.cov).sqrt()?;
    let tr = p.cov.trace() + q.cov.trace() - 2.0 * cross.trace();
    Ok((dm + tr).max(0.0))
}

/// Closed form for box-derived Gaussians: squared Euclidean distance between
/// `[cx, cy, w/2, h/2]` of the two boxes.
pub fn wasserstein2_boxes<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let half = T::cst(0.5);
    (a.cx - b.cx).powi2() + (a.cy - b.cy).powi2() + ((a.w - b.w) * half).powi2() + ((a.h - b.h) * half).powi2()
}

fn check_c(op: &'static str, c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(op, format!("normalization constant C must be > 0, got {c}")));
    }
    Ok(())
}

pub(crate) fn nwd_t<T: Real>(a: &BBox<T>, b: &BBox<T>, c: f64) -> T {
    (-(wasserstein2_boxes(a, b).sqrt() / T::cst(c))).exp()
}

/// Normalized Wasserstein distance `exp(-sqrt(W2^2) / C)` in `(0, 1]`.
pub fn nwd(a: &BBox, b: &BBox, c: f64) -> Result<f64> {
    check_c("nwd", c)?;
    Ok(nwd_t(a, b, c))
}

pub fn nwd_loss(pred: &BBox, gt: &BBox, c: f64) -> Result<f64> {
    Ok(1.0 - nwd(pred, gt, c)?)
}

pub fn iou_t<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let zero = T::cst(0.0);
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(zero);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(zero);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union.val() <= 0.0 {
        return zero;
    }
    inter / union
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_t(a, b)
}

pub fn ciou_loss_t<T: Real>(pred: &BBox<T>, gt: &BBox<T>) -> T {
    let one = T::cst(1.0);
    let iou = iou_t(pred, gt);
    let cw = pred.x2().max(gt.x2()) - pred.x1().min(gt.x1());
    let ch = pred.y2().max(gt.y2()) - pred.y1().min(gt.y1());
    let diag2 = cw.powi2() + ch.powi2();
    let rho2 = (pred.cx - gt.cx).powi2() + (pred.cy - gt.cy).powi2();
    let v = T::cst(4.0 / (PI * PI)) * ((gt.w / gt.h).atan() - (pred.w / pred.h).atan()).powi2();
    let denom = one - iou + v;
    let aspect = if denom.val() > 0.0 { v / denom * v } else { T::cst(0.0) };
    let center = if diag2.val() > 0.0 { rho2 / diag2 } else { T::cst(0.0) };
    one - iou + center + aspect
}

/// Complete-IoU loss `1 - IoU + rho^2 / c^2 + alpha v`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    ciou_loss_t(pred, gt)
}

/// Value and gradient of a box loss with respect to `(cx, cy, w, h)` of `pred`.
pub fn grad_wrt_pred<F>(pred: &BBox, gt: &BBox, f: F) -> (f64, [f64; 4])
where
    F: Fn(&BBox<Dual<4>>, &BBox<Dual<4>>) -> Dual<4>,
{
    let p = BBox {
        cx: Dual::var(pred.cx, 0),
        cy: Dual::var(pred.cy, 1),
        w: Dual::var(pred.w, 2),
        h: Dual::var(pred.h, 3),
    };
    let out = f(&p, &gt.lift());
    (out.v, out.d)
}

pub fn nwd_loss_grad(pred: &BBox, gt: &BBox, c: f64) -> Result<(f64, [f64; 4])> {
    check_c("nwd_loss", c)?;
    Ok(grad_wrt_pred(pred, gt, |p, g| Dual::cst(1.0) - nwd_t(p, g, c)))
}

pub fn iou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    grad_wrt_pred(pred, gt, |p, g| Dual::cst(1.0) - iou_t(p, g))
}

pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    grad_wrt_pred(pred, gt, ciou_loss_t)
}

/// NWD normalization constant and IoU share of the mixed box loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub c: f64,
    pub iou_ratio: f64,
}

impl LossConfig {
    pub fn new(c: f64, iou_ratio: f64) -> Result<Self> {
        check_c("LossConfig", c)?;
        if !(0.0..=1.0).contains(&iou_ratio) {
            return Err(Error::invalid("LossConfig", format!("iou_ratio must be in [0, 1], got {iou_ratio}")));
        }
        Ok(LossConfig { c, iou_ratio })
    }
}

/// `(1 - iou_ratio) * mean(1 - nwd) + iou_ratio * mean(1 - iou)`, with the
/// mean taken over pairs for each term separately. Empty input gives 0.
pub fn box_regression_loss_t<T: Real>(pairs: &[(BBox<T>, BBox<T>, T)], cfg: &LossConfig) -> T {
    if pairs.is_empty() {
        return T::cst(0.0);
    }
    let one = T::cst(1.0);
    let n = T::cst(pairs.len() as f64);
    let mut nwd_sum = T::cst(0.0);
    let mut iou_sum = T::cst(0.0);
    for (p, g, iou) in pairs {
        nwd_sum = nwd_sum + (one - nwd_t(p, g, cfg.c));
        iou_sum = iou_sum + (one - *iou);
    }
    T::cst(1.0 - cfg.iou_ratio) * (nwd_sum / n) + T::cst(cfg.iou_ratio) * (iou_sum / n)
}

pub fn box_regression_loss(pairs: &[(BBox, BBox, f64)], cfg: &LossConfig) -> Result<f64> {
    check_c("box_regression_loss", cfg.c)?;
    if let Some((_, _, bad)) = pairs.iter().find(|(_, _, v)| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("box_regression_loss", format!("iou value {bad} outside [0, 1]")));
    }
    Ok(box_regression_loss_t(pairs, cfg))
}
