//! Finite-difference gradient audits shared by the command line and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockSpec, BnState, ParamStore};
use crate::boxes::{ciou_loss, ciou_loss_grad, nwd_loss, nwd_loss_grad, BBox};
use crate::data::{synth_dataset, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::simam::{simam, SimamConfig};
use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::{Shape, Tensor};
use crate::train::{gradient_audit, TrainConfig};

/// Relative error every audit must stay under.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

pub const SUITES: [&str; 5] = ["simam", "nwd", "ciou", "blocks", "model"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditLine {
    pub suite: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl AuditLine {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= AUDIT_TOLERANCE
    }
}

/// Audit of `d(sum(out * r)) / d(input, params)` for one block, with batch
/// statistics in every batch norm.
pub fn audit_block(spec: BlockSpec, input: Shape, max_components: usize, seed: u64) -> Result<GradCheckReport> {
    let net = spec.build()?;
    let store = ParamStore::init(&net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Tensor::randn(input, &mut rng);
    let out_shape = *net.infer_shapes(&[input])?.last().expect("a block has an output");
    let r = Tensor::randn(out_shape, &mut rng);
    let mut inputs = vec![x, r];
    inputs.extend(store.tensors().iter().cloned());
    let check = GradCheck {
        max_components: Some(max_components),
        seed,
        ..GradCheck::default()
    };
    check.run(
        |g, v| {
            let p = store.attach(v[2..].to_vec())?;
            let bn = BnState::Train {
                running: None,
                momentum: 0.0,
            };
            let y = net.forward(g, &p, &[v[0]], bn)?;
            let yr = g.mul(y[0], v[1])?;
            g.sum(yr)
        },
        &inputs,
    )
}

/// One small instance of every block kind.
pub fn block_specs() -> Vec<BlockSpec> {
    vec![
        BlockSpec::cbs(4, 6, 3, 2),
        BlockSpec::elan(4, 2, 8),
        BlockSpec::elan_w(4, 2, 8),
        BlockSpec::mp1(4),
        BlockSpec::gsconv(4, 6, 3, 1),
        BlockSpec::gs_bottleneck(4, 6),
        BlockSpec::vov_gscsp(4, 8),
        BlockSpec::simam(4),
    ]
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.0..40.0),
        rng.random_range(0.0..40.0),
        rng.random_range(1.0..20.0),
        rng.random_range(1.0..20.0),
    )
}

/// Dual-number gradients of a box loss against central differences over
/// `pairs` random pairs.
fn audit_box_loss(
    suite: &str,
    pairs: usize,
    seed: u64,
    value: impl Fn(&BBox, &BBox) -> Result<f64>,
    grad: impl Fn(&BBox, &BBox) -> Result<[f64; 4]>,
) -> Result<AuditLine> {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        let analytic = grad(&p, &g)?;
        for (k, a) in analytic.iter().enumerate() {
            let shifted = |d: f64| {
                let mut v = [p.cx, p.cy, p.w, p.h];
                v[k] += d;
                BBox::new(v[0], v[1], v[2], v[3])
            };
            let numeric = (value(&shifted(eps), &g)? - value(&shifted(-eps), &g)?) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(AuditLine {
        suite: suite.into(),
        max_rel_error: worst,
        checked: 4 * pairs,
    })
}

fn from_report(suite: &str, r: &GradCheckReport) -> AuditLine {
    AuditLine {
        suite: suite.into(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
    }
}

/// Full toy model (width 0.25, 64 x 64 input) on two synthetic scenes.
pub fn audit_model(sample_size: usize, seed: u64) -> Result<AuditLine> {
    let data = synth_dataset(
        &SynthConfig {
            img_size: 64,
            seed,
            ..SynthConfig::default()
        },
        2,
    )?;
    let model = Model::build(&ModelConfig {
        width: 0.25,
        input_size: 64,
        in_channels: 1,
        n_classes: 2,
        ..ModelConfig::default()
    })?;
    let store = model.init_params(seed);
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let spec = TrainConfig::default().loss_spec(&model, 6.0);
    let r = gradient_audit(&model, &store, &samples, &spec, sample_size, seed, 1e-6, None)?;
    Ok(AuditLine {
        suite: "model".into(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
    })
}

/// Runs one named suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<AuditLine>> {
    match name {
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        "simam" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(Shape::new(2, 3, 5, 6), &mut rng);
            let r = Tensor::randn(x.shape(), &mut rng);
            let cfg = SimamConfig::default();
            let report = GradCheck::default().run(
                |g, v| {
                    let y = simam(g, v[0], &cfg)?;
                    let yr = g.mul(y, v[1])?;
                    g.sum(yr)
                },
                &[x, r],
            )?;
            Ok(vec![from_report("simam", &report)])
        }
        "nwd" => Ok(vec![audit_box_loss(
            "nwd",
            200,
            seed,
            |p, g| nwd_loss(p, g, 6.0),
            |p, g| Ok(nwd_loss_grad(p, g, 6.0)?.1),
        )?]),
        "ciou" => Ok(vec![audit_box_loss(
            "ciou",
            200,
            seed,
            |p, g| Ok(ciou_loss(p, g)),
            |p, g| Ok(ciou_loss_grad(p, g).1),
        )?]),
        "blocks" => block_specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let r = audit_block(spec, Shape::new(2, 4, 6, 6), 12, seed + i as u64)?;
                Ok(from_report(&format!("block:{}", spec.kind.label()), &r))
            })
            .collect(),
        "model" => Ok(vec![audit_model(48, seed)?]),
        other => Err(Error::Config(format!(
            "unknown audit suite {other:?}; expected all, {}",
            SUITES.join(", ")
        ))),
    }
}
