//! Desk-scale training: SGD with momentum over the detection loss, per-epoch
//! validation and finite-difference audits of the assembled model.

mod loss;


use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    assign_targets, assign_targets_with, total_loss, total_loss_var, Assignment, LossMode, LossSpec, LossTerms, Positive, Targets, ANCHOR_RATIO_LIMIT,
};

use crate::blocks::{BnState, ParamStore};
use crate::data::{batch_images, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, nms, Detection, EvalConfig, EvalReport, GroundTruth};
use crate::model::{Model, STRIDES};
use crate::tensor::{FaultInjection, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate follows a half cosine from `learning_rate` down to
    /// `learning_rate * final_lr_ratio` over all steps; 1 keeps it constant.
    pub final_lr_ratio: f64,
    pub momentum: f64,
    pub loss_mode: LossMode,
    pub iou_ratio: f64,
    /// NWD constant in pixels; `None` uses the mean `sqrt(w h)` of the
    /// training ground truths.
    pub nwd_c: Option<f64>,
    pub seed: u64,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    pub bn_momentum: f64,
    /// Operating point for the logged precision and recall.
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub assign: Assignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            final_lr_ratio: 0.1,
            momentum: 0.9,
            loss_mode: LossMode::Mixed,
            iou_ratio: 0.5,
            nwd_c: None,
            seed: 0,
            box_weight: 1.0,
            obj_weight: 0.05,
            cls_weight: 0.5,
            bn_momentum: 0.03,
            conf_thresh: 0.25,
            nms_iou: 0.5,
            assign: Assignment {
                neighbor_cells: true,
                all_anchors: false,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad(format!("final_lr_ratio {} must be in [0, 1]", self.final_lr_ratio));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.iou_ratio) {
            return bad(format!("iou_ratio {} must be in [0, 1]", self.iou_ratio));
        }
        if self.nwd_c.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("nwd_c must be > 0".into());
        }
        if [self.box_weight, self.obj_weight, self.cls_weight].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} must be in [0, 1]", self.bn_momentum));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("conf_thresh and nms_iou must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate for step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let r = self.final_lr_ratio;
        if r == 1.0 || total <= 1 {
            return self.learning_rate;
        }
        let progress = t as f64 / (total - 1) as f64;
        self.learning_rate * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn loss_spec(&self, model: &Model, nwd_c: f64) -> LossSpec {
        LossSpec {
            mode: self.loss_mode,
            iou_ratio: self.iou_ratio,
            nwd_c,
            weights: [self.box_weight, self.obj_weight, self.cls_weight],
            anchors: model.config().anchors.clone(),
            strides: STRIDES.to_vec(),
            n_classes: model.config().n_classes,
            assign: self.assign,
        }
    }
}

/// Mean `sqrt(w h)` over all ground truths, in pixels.
pub fn default_nwd_c(data: &Dataset) -> Result<f64> {
    let sizes: Vec<f64> = data
        .samples
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| (g.bbox.w * g.bbox.h).sqrt()))
        .collect();
    if sizes.is_empty() {
        return Err(Error::Config("no ground truths to derive the NWD constant from".into()));
    }
    Ok(sizes.iter().sum::<f64>() / sizes.len() as f64)
}

/// Momentum buffers, one per parameter in store order.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// `v <- momentum v + g; p <- p - lr v`, applied to every parameter.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], lr: f64, momentum: f64, state: &mut SgdState) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid("sgd_step", format!("learning rate {lr} must be >= 0")));
    }
    if grads.len() != store.len() {
        return Err(Error::shape("sgd_step", format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for ((name, p), g) in store.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", format!("{name}: gradient {} vs {}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    }
    for (((_, p), g), v) in store.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub val_map50: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub log: Vec<EpochRecord>,
    pub nwd_c: f64,
}

fn grids_of(model: &Model, batch: usize) -> Result<Vec<(usize, usize)>> {
    Ok(model.output_shapes(batch)?.iter().map(|s| (s.h, s.w)).collect())
}

fn gts_of(samples: &[&Sample]) -> Vec<Vec<GroundTruth>> {
    samples.iter().map(|s| s.gts.clone()).collect()
}

/// One forward/backward pass in training mode. Returns the loss terms and the
/// gradient of every parameter in store order.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    samples: &[&Sample],
    spec: &LossSpec,
    bn_momentum: f64,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let images = batch_images(samples)?;
    let targets = assign_targets_with(
        &gts_of(samples),
        &spec.anchors,
        &grids_of(model, samples.len())?,
        &spec.strides,
        spec.assign,
    )?;
    let mut g = Graph::new();
    let params = store.bind(&mut g, true);
    let x = g.leaf(images, false);
    let bn = BnState::Train {
        running: Some(&mut store.running),
        momentum: bn_momentum,
    };
    let outs = model.forward(&mut g, &params, x, bn)?;
    let (loss, terms) = total_loss_var(&mut g, &outs, &targets, spec)?;
    let grads = g.backward(loss)?;
    let list = params.iter().map(|(_, v)| grads.get_or_zeros(v)).collect();
    Ok((terms, list))
}

/// Runs the model over `data` in chunks and returns per-image detections
/// after class-wise NMS, best first, at most `max_det` per image.
pub fn predict_dataset(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    conf_floor: f64,
    nms_iou: f64,
    max_det: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for dets in model.detect(store, &batch_images(&refs)?, conf_floor)? {
            let mut kept = nms(&dets, nms_iou)?;
            kept.truncate(max_det);
            out.push(kept);
        }
    }
    Ok(out)
}

/// Detection floor used when collecting detections for AP.
pub const EVAL_CONF_FLOOR: f64 = 0.001;
pub const MAX_DETECTIONS: usize = 100;

pub fn evaluate_model(model: &Model, store: &ParamStore, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predict_dataset(model, store, data, EVAL_CONF_FLOOR.min(cfg.conf_thresh), cfg.iou_thresh, MAX_DETECTIONS)?;
    let gts: Vec<Vec<GroundTruth>> = data.samples.iter().map(|s| s.gts.clone()).collect();
    evaluate(&preds, &gts, model.config().n_classes, cfg)
}

/// Trains from `init` (or a seeded initialization) and evaluates on `val`
/// after every epoch. The result is a pure function of the inputs.
pub fn train(
    model: &Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    init: Option<ParamStore>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nwd_c = match cfg.nwd_c {
        Some(c) => c,
        None => default_nwd_c(train_set)?,
    };
    let spec = cfg.loss_spec(model, nwd_c);
    let mut store = match init {
        Some(s) => {
            s.check_against(model.net())?;
            s
        }
        None => model.init_params(cfg.seed),
    };
    let eval_cfg = EvalConfig {
        conf_thresh: cfg.conf_thresh,
        iou_thresh: 0.5,
        ..EvalConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut sgd = SgdState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train_set.samples[i]).collect();
            let (terms, grads) = train_step(model, &mut store, &samples, &spec, cfg.bn_momentum)?;
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: terms.total,
                });
            }
            sgd_step(&mut store, &grads, cfg.lr_at(t, total_steps), cfg.momentum, &mut sgd)?;
            t += 1;
            for (s, v) in sums.iter_mut().zip([terms.total, terms.box_loss, terms.obj, terms.cls]) {
                *s += v;
            }
            steps += 1;
        }
        let val_map50 = match val {
            Some(v) if !v.is_empty() => Some(evaluate_model(model, &store, v, &eval_cfg)?.map50),
            _ => None,
        };
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_box: sums[1] / n,
            loss_obj: sums[2] / n,
            loss_cls: sums[3] / n,
            val_map50,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutput { store, log, nwd_c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// max over sampled parameters of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Central finite differences of the total loss against tape gradients on
/// `sample_size` parameter components drawn with `seed`. Batch norm runs on
/// batch statistics without touching running statistics. `fault` corrupts
/// one operator family's backward rule in the analytic pass.
pub fn gradient_audit(
    model: &Model,
    store: &ParamStore,
    samples: &[&Sample],
    spec: &LossSpec,
    sample_size: usize,
    seed: u64,
    eps: f64,
    fault: Option<FaultInjection>,
) -> Result<AuditReport> {
    let images = batch_images(samples)?;
    let targets = assign_targets_with(
        &gts_of(samples),
        &spec.anchors,
        &grids_of(model, samples.len())?,
        &spec.strides,
        spec.assign,
    )?;
    let loss_of = |g: &mut Graph, store: &ParamStore, requires_grad: bool| -> Result<(Var, Vec<Var>)> {
        let params = store.bind(g, requires_grad);
        let x = g.leaf(images.clone(), false);
        let bn = BnState::Train {
            running: None,
            momentum: 0.0,
        };
        let outs = model.forward(g, &params, x, bn)?;
        let (loss, _) = total_loss_var(g, &outs, &targets, spec)?;
        Ok((loss, params.iter().map(|(_, v)| v).collect()))
    };

    let mut g = Graph::new();
    g.inject_fault(fault);
    let (loss, vars) = loss_of(&mut g, store, true)?;
    let grads = g.backward(loss)?;

    let sizes: Vec<usize> = store.tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = (0..sample_size.min(total)).map(|_| rng.random_range(0..total)).collect();
    picks.sort_unstable();
    picks.dedup();

    let mut report = AuditReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = store.clone();
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let name = store.names()[t].clone();
        let analytic = grads.get_or_zeros(vars[t]).data()[i];
        let orig = store.tensors()[t].data()[i];
        let mut eval_at = |v: f64| -> Result<f64> {
            work.get_mut(&name).expect("same store").data_mut()[i] = v;
            let mut g = Graph::new();
            let (loss, _) = loss_of(&mut g, &work, false)?;
            g.value(loss).item()
        };
        let numeric = (eval_at(orig + eps)? - eval_at(orig - eps)?) / (2.0 * eps);
        eval_at(orig)?;
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}
