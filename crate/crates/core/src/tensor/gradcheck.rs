//! Central finite-difference audits of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FaultInjection, Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked components of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst component.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many randomly chosen components per input.
    pub max_components: Option<usize>,
    pub seed: u64,
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            max_components: None,
            seed: 0,
            fault: None,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let analytic = {
            let mut g = Graph::with_precision(Precision::F64);
            g.set_check_finite(true);
            g.inject_fault(self.fault);
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = f(&mut g, &vars)?;
            let grads = g.backward(out)?;
            vars.iter().map(|v| grads.get_or_zeros(*v)).collect::<Vec<_>>()
        };

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut g = Graph::with_precision(Precision::F64);
            g.set_check_finite(true);
            let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = f(&mut g, &vars)?;
            g.value(out).item()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let indices: Vec<usize> = match self.max_components {
                Some(m) if m < n => {
                    let mut v = sample(&mut rng, n, m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for i in indices {
                let orig = input.data()[i];
                work[which].data_mut()[i] = orig + self.eps;
                let plus = eval(&work)?;
                work[which].data_mut()[i] = orig - self.eps;
                let minus = eval(&work)?;
                work[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[which].data()[i];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("gradient of input {which}[{i}]"),
                    });
                }
                let rel = (a - numeric).abs() / numeric.abs().max(1.0);
                report.checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel >= report.max_rel_error {
                        report.worst = Some((which, i));
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Checks every component of every input with central differences of step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(f, inputs)
}
