//! Parameter-free SimAM attention.
//!
//! Every neuron `t` of a channel gets the minimal energy
//! `e = 4(v + λ) / ((t - μ)² + 2v + 2λ)` where `μ` and `v` are the mean and
//! population variance of all `H·W` neurons of that channel, the target
//! included. The refined feature is `sigmoid(1/e) * x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{CustomOp, Graph, Shape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimamConfig {
    pub lambda: f64,
}

impl Default for SimamConfig {
    fn default() -> Self {
        SimamConfig { lambda: DEFAULT_LAMBDA }
    }
}

impl SimamConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = SimamConfig { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("simam", format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Minimal energies, one per neuron, same shape as the feature.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap(pub Tensor);

impl EnergyMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Mean and population variance of one plane.
fn plane_stats(plane: &[f64]) -> (f64, f64) {
    let m = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / m;
    let var = plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, var)
}

fn check_input(feature: &Tensor, cfg: &SimamConfig) -> Result<()> {
    cfg.validate()?;
    if feature.shape().plane() == 0 {
        return Err(Error::shape("simam", "feature has no spatial elements"));
    }
    Ok(())
}

pub fn simam_energy(feature: &Tensor, cfg: &SimamConfig) -> Result<EnergyMap> {
    check_input(feature, cfg)?;
    let hw = feature.shape().plane();
    let mut out = Tensor::zeros(feature.shape());
    for (src, dst) in feature.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
        let (mean, var) = plane_stats(src);
        let d = var + cfg.lambda;
        for (t, e) in src.iter().zip(dst.iter_mut()) {
            *e = 4.0 * d / ((t - mean).powi(2) + 2.0 * d);
        }
    }
    Ok(EnergyMap(out))
}

/// Attention weights `sigmoid(1/e)`.
pub fn simam_weights(feature: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let mut e = simam_energy(feature, cfg)?.0;
    e.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(1.0 / *v));
    Ok(e)
}

pub fn simam_apply(feature: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let mut w = simam_weights(feature, cfg)?;
    w.data_mut().iter_mut().zip(feature.data()).for_each(|(w, x)| *w *= x);
    Ok(w)
}

struct SimamOp {
    lambda: f64,
}

impl CustomOp for SimamOp {
    fn name(&self) -> &'static str {
        "SimAM"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let hw = x.shape().plane();
        let m = hw as f64;
        let mut dx = Tensor::zeros(x.shape());
        let mut a = vec![0.0; hw];
        let planes = x.data().chunks(hw).zip(grad_out.data().chunks(hw));
        for ((xs, gs), dst) in planes.zip(dx.data_mut().chunks_mut(hw)) {
            let (mean, var) = plane_stats(xs);
            let big_d = var + self.lambda;
            let (mut s1, mut s2) = (0.0, 0.0);
            for i in 0..hw {
                let d = xs[i] - mean;
                let w = sigmoid_scalar(d * d / (4.0 * big_d) + 0.5);
                a[i] = gs[i] * xs[i] * w * (1.0 - w);
                s1 += a[i] * d;
                s2 += a[i] * d * d;
                dst[i] = gs[i] * w;
            }
            for i in 0..hw {
                let d = xs[i] - mean;
                dst[i] += a[i] * d / (2.0 * big_d) - s1 / (2.0 * big_d * m) - d * s2 / (2.0 * big_d * big_d * m);
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Records SimAM on the tape; gradients flow through the channel statistics.
pub fn simam(graph: &mut Graph, input: Var, cfg: &SimamConfig) -> Result<Var> {
    let out = simam_apply(graph.value(input), cfg)?;
    graph.custom(&[input], out, Box::new(SimamOp { lambda: cfg.lambda }))
}

/// Per-pixel mean over channels of `1/e`, min-max normalized to `[0, 1]`
/// separately for each batch item. Shape `(n, 1, h, w)`; a flat map becomes
/// all zeros.
pub fn energy_heatmap(feature: &Tensor, cfg: &SimamConfig) -> Result<Tensor> {
    let e = simam_energy(feature, cfg)?.0;
    let s = feature.shape();
    let hw = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let dst = &mut out.data_mut()[n * hw..(n + 1) * hw];
        for c in 0..s.c {
            let off = (n * s.c + c) * hw;
            for (d, e) in dst.iter_mut().zip(&e.data()[off..off + hw]) {
                *d += 1.0 / e / s.c as f64;
            }
        }
        let lo = dst.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            dst.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        } else {
            dst.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}
