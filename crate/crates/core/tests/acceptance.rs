//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ISTD_ACCEPTANCE_SKIP_TRAINING=1` to skip the desk-scale training
//! criterion (about twenty minutes on one core); it is then reported as SKIP.
//! The suite reports and exits 0 either way; `ISTD_ACCEPTANCE_STRICT=1` makes
//! any FAIL line a non-zero exit.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use istd_core::audit::{run_suite, AUDIT_TOLERANCE};
use istd_core::blocks::BuildOptions;
use istd_core::boxes::{
    gauss_from_box, iou, iou_loss_grad, nwd, nwd_loss, nwd_loss_grad, wasserstein2_boxes, wasserstein2_general, BBox,
};
use istd_core::data::{save_dataset, save_image, split_dataset, synth_dataset, SynthConfig};
use istd_core::eval::{average_precision, evaluate, Detection, EvalConfig, GroundTruth};
use istd_core::model::{
    build_backbone_with, module_rows, save_weights, AnchorSet, BackboneVariant, Model, ModelConfig, ORIGINAL_TOTAL,
    RECONSTRUCTED_TOTAL, STRIDES, TABLE1_ROWS,
};
use istd_core::simam::{energy_heatmap, simam_weights, SimamConfig};
use istd_core::tensor::{Shape, Tensor};
use istd_core::train::{assign_targets, Assignment, evaluate_model, total_loss, train, LossMode, LossSpec, TrainConfig};

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: Some(pass),
        detail: detail.into(),
    }
}

fn table1() -> Outcome {
    let t = Instant::now();
    let net = build_backbone_with(BackboneVariant::Reconstructed, 1.0, BuildOptions::default()).unwrap();
    let rows: Vec<u64> = module_rows(&net).iter().map(|r| r.params).collect();
    let original = build_backbone_with(BackboneVariant::Original, 1.0, BuildOptions::default())
        .unwrap()
        .param_count();
    let total = net.param_count();
    let pct = (100.0 * total as f64 / original as f64).round();
    let secs = t.elapsed().as_secs_f64();
    let ok = rows == TABLE1_ROWS && total == RECONSTRUCTED_TOTAL && original == ORIGINAL_TOTAL && pct == 45.0;
    outcome(
        ok && secs < 1.0,
        format!("rows {rows:?}, total {total}, original {original}, ratio {pct}%, {secs:.3}s (limit 1s)"),
    )
}

fn random_box(rng: &mut ChaCha8Rng, pos: f64, size: f64) -> BBox {
    BBox::new(
        rng.random_range(-pos..pos),
        rng.random_range(-pos..pos),
        rng.random_range(0.5..size),
        rng.random_range(0.5..size),
    )
}

fn closed_form() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng, 100.0, 60.0), random_box(&mut rng, 100.0, 60.0));
        let general = wasserstein2_general(&gauss_from_box(&a), &gauss_from_box(&b)).unwrap();
        let simple = wasserstein2_boxes(&a, &b);
        worst = worst.max((general - simple).abs() / simple.max(1.0));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 5.0,
        format!("10000 pairs, max rel diff {worst:.3e} (tol 1e-9), {secs:.3}s (limit 5s)"),
    )
}

fn nwd_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = [0usize; 5];
    let n = 10_000;
    for _ in 0..n {
        let (a, b, c) = (
            random_box(&mut rng, 50.0, 30.0),
            random_box(&mut rng, 50.0, 30.0),
            random_box(&mut rng, 50.0, 30.0),
        );
        let k = rng.random_range(0.5..20.0);
        let v = nwd(&a, &b, k).unwrap();
        violations[0] += !(v > 0.0 && v <= 1.0) as usize;
        violations[1] += (nwd(&a, &a, k).unwrap() != 1.0) as usize;
        violations[2] += (nwd(&b, &a, k).unwrap() != v) as usize;
        let (dx, dy) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let moved = nwd(&a.translate(dx, dy), &b.translate(dx, dy), k).unwrap();
        violations[3] += ((moved - v).abs() > 1e-12) as usize;
        let s = rng.random_range(0.1..10.0);
        let before = v.partial_cmp(&nwd(&a, &c, k).unwrap());
        let after = nwd(&a.scale(s), &b.scale(s), k * s)
            .unwrap()
            .partial_cmp(&nwd(&a.scale(s), &c.scale(s), k * s).unwrap());
        let tied = (v - nwd(&a, &c, k).unwrap()).abs() < 1e-12;
        violations[4] += (!tied && before != after) as usize;
    }
    let total: usize = violations.iter().sum();
    outcome(
        total == 0,
        format!("{n} pairs; violations bounds/identity/symmetry/translation/ranking = {violations:?}"),
    )
}

/// A pair `(pred, gt)` separated by a gap of at least 1 px on one axis.
fn disjoint_pair(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    let g = BBox::new(0.0, 0.0, rng.random_range(2.0..12.0), rng.random_range(2.0..12.0));
    let (w, h) = (rng.random_range(2.0..12.0), rng.random_range(2.0..12.0));
    let gap = rng.random_range(1.0..8.0);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let along = rng.random_range(-6.0..6.0);
    let p = if rng.random_bool(0.5) {
        BBox::new(side * ((g.w + w) / 2.0 + gap), along, w, h)
    } else {
        BBox::new(along, side * ((g.h + h) / 2.0 + gap), w, h)
    };
    (p, g)
}

fn dichotomy_isolated(c: f64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut iou_max, mut nwd_min) = (0.0f64, f64::INFINITY);
    let e = 1e-6;
    for _ in 0..100 {
        let (p, g) = disjoint_pair(&mut rng);
        assert_eq!(iou(&p, &g), 0.0);
        for k in 0..2 {
            let shift = |d: f64| if k == 0 { p.translate(d, 0.0) } else { p.translate(0.0, d) };
            let fd_iou = ((1.0 - iou(&shift(e), &g)) - (1.0 - iou(&shift(-e), &g))) / (2.0 * e);
            iou_max = iou_max.max(fd_iou.abs()).max(iou_loss_grad(&p, &g).1[k].abs());
        }
        let fd = |k: usize| {
            let shift = |d: f64| if k == 0 { p.translate(d, 0.0) } else { p.translate(0.0, d) };
            (nwd_loss(&shift(e), &g, c).unwrap() - nwd_loss(&shift(-e), &g, c).unwrap()) / (2.0 * e)
        };
        let analytic = nwd_loss_grad(&p, &g, c).unwrap().1;
        nwd_min = nwd_min.min(fd(0).hypot(fd(1))).min(analytic[0].hypot(analytic[1]));
    }
    (iou_max, nwd_min)
}

fn loss_spec(mode: LossMode) -> LossSpec {
    LossSpec {
        mode,
        iou_ratio: 0.5,
        nwd_c: 6.0,
        weights: [0.05, 1.0, 0.5],
        anchors: AnchorSet::default(),
        strides: STRIDES.to_vec(),
        n_classes: 1,
        assign: Assignment::default(),
    }
}

/// Center-logit finite differences of `total_loss` for one positive whose
/// decoded box misses its ground truth.
fn dichotomy_assembled() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut iou_max, mut mixed_min) = (0.0f64, f64::INFINITY);
    let grids: Vec<(usize, usize)> = STRIDES.iter().map(|s| (64 / s, 64 / s)).collect();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut seen = 0;
    while seen < 100 {
        let g = BBox::new(
            rng.random_range(8.0..56.0),
            rng.random_range(8.0..56.0),
            rng.random_range(2.0..3.5),
            rng.random_range(2.0..3.5),
        );
        let targets = assign_targets(&[vec![GroundTruth::new(g, 0)]], &AnchorSet::default(), &grids, &STRIDES).unwrap();
        let p = targets.positives[0];
        let st = STRIDES[p.scale] as f64;
        let (aw, ah) = AnchorSet::default().get(p.scale, p.anchor);
        let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let z = [
            sign(&mut rng) * rng.random_range(2.0..5.0),
            sign(&mut rng) * rng.random_range(2.0..5.0),
            rng.random_range(-4.0..-2.0),
            rng.random_range(-4.0..-2.0),
        ];
        let pred = BBox::new(
            (2.0 * sig(z[0]) - 0.5 + p.col as f64) * st,
            (2.0 * sig(z[1]) - 0.5 + p.row as f64) * st,
            4.0 * sig(z[2]).powi(2) * aw,
            4.0 * sig(z[3]).powi(2) * ah,
        );
        if iou(&pred, &g) > 0.0 {
            continue;
        }
        seen += 1;
        let mut raw: Vec<Tensor> = STRIDES
            .iter()
            .map(|s| Tensor::zeros(Shape::new(1, 18, 64 / s, 64 / s)))
            .collect();
        for (j, v) in z.iter().enumerate() {
            raw[p.scale].set(0, p.anchor * 6 + j, p.row, p.col, *v);
        }
        for j in 0..2 {
            let fd = |mode: LossMode| {
                let at = |d: f64| {
                    let mut r = raw.clone();
                    r[p.scale].set(0, p.anchor * 6 + j, p.row, p.col, z[j] + d);
                    total_loss(&r, &targets, &loss_spec(mode)).unwrap().0.total
                };
                ((at(1e-6) - at(-1e-6)) / 2e-6).abs()
            };
            iou_max = iou_max.max(fd(LossMode::IouOnly));
            mixed_min = mixed_min.min(fd(LossMode::Mixed));
        }
    }
    (iou_max, mixed_min)
}

fn dichotomy() -> Outcome {
    let (a, b) = dichotomy_isolated(6.0);
    let (c, d) = dichotomy_assembled();
    outcome(
        a <= 1e-12 && b > 1e-6 && c <= 1e-12 && d > 1e-6,
        format!(
            "isolated: max |d(1-IoU)| {a:.1e} (tol 1e-12), min |d(1-NWD)| {b:.3e} (> 1e-6); \
             total_loss: iou_only {c:.1e}, mixed {d:.3e}"
        ),
    )
}

fn audits() -> Outcome {
    let t = Instant::now();
    let lines = run_suite("all", 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passes()).map(|l| l.suite.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} suites, max rel error {worst:.3e} (tol {AUDIT_TOLERANCE:e}), failed {failed:?}, {secs:.1}s (limit 120s)",
            lines.len()
        ),
    )
}

fn simam_neutral() -> Outcome {
    let cfg = ModelConfig::default();
    let with = Model::build(&cfg).unwrap().count_params();
    let without = Model::build(&ModelConfig { simam: false, ..cfg }).unwrap().count_params();
    let flat = Tensor::full(Shape::new(1, 2, 5, 5), 0.7);
    let w = simam_weights(&flat, &SimamConfig::default()).unwrap();
    let target = 1.0 / (1.0 + (-0.5f64).exp());
    let err = w.data().iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
    outcome(
        with == without && err <= 1e-12,
        format!("params with/without SimAM {with}/{without}, constant-channel weight error {err:.1e} (tol 1e-12)"),
    )
}

fn scale_surgery() -> Outcome {
    let model = Model::build(&ModelConfig::default()).unwrap();
    let shapes = model.output_shapes(1).unwrap();
    let sizes: Vec<(usize, usize)> = shapes.iter().map(|s| (s.h, s.w)).collect();
    outcome(
        sizes == vec![(160, 160), (80, 80), (40, 40)],
        format!("640 input -> maps {sizes:?}"),
    )
}

fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h)
}

fn det(bbox: BBox, class_id: usize, score: f64) -> Detection {
    Detection { bbox, class_id, score }
}

fn eval_fixtures() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        ok &= pass;
        if !pass {
            notes.push(name.to_string());
        }
    };
    check("AP [TP]", average_precision(&[true], 1) == Some(1.0));
    check("AP [FP, TP]", average_precision(&[false, true], 1) == Some(0.5));

    let gts = vec![
        vec![GroundTruth::new(b(20.0, 20.0, 10.0, 10.0), 0)],
        vec![GroundTruth::new(b(50.0, 50.0, 8.0, 8.0), 1), GroundTruth::new(b(10.0, 40.0, 6.0, 6.0), 0)],
        vec![GroundTruth::new(b(30.0, 30.0, 10.0, 10.0), 0)],
    ];
    let preds = vec![
        vec![det(b(21.0, 20.0, 10.0, 10.0), 0, 0.8), det(b(20.0, 20.0, 10.0, 10.0), 0, 0.9)],
        vec![det(b(50.0, 50.0, 8.0, 8.0), 1, 0.7)],
        vec![det(b(30.0, 30.0, 10.0, 10.0), 1, 0.6)],
    ];
    let cfg = EvalConfig {
        conf_thresh: 0.5,
        ..EvalConfig::default()
    };
    let r = evaluate(&preds, &gts, 2, &cfg).unwrap();
    let t = 1.0 / 3.0;
    check("fixture P/R", r.precision == 0.5 && r.recall == 0.5 && (r.tp, r.fp, r.n_gt) == (2, 2, 4));
    check("fixture AP", r.per_class_ap[&0] == t && r.per_class_ap[&1] == 1.0 && r.map50 == (t + 1.0) / 2.0);
    check(
        "fixture confusion",
        r.confusion == vec![vec![t, t, t], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
    );
    let rows_ok = r
        .confusion
        .iter()
        .all(|row| row.iter().sum::<f64>() == 0.0 || (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    check("confusion rows", rows_ok);

    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|g| det(g.bbox, g.class_id, 0.9)).collect())
        .collect();
    let p = evaluate(&perfect, &gts, 2, &EvalConfig::default()).unwrap();
    check("perfect", (p.precision, p.recall, p.map50) == (1.0, 1.0, 1.0));
    outcome(
        ok,
        if notes.is_empty() {
            "AP orderings, frozen 3-image fixture, row sums (tol 1e-9), perfect P=R=mAP=1".to_string()
        } else {
            format!("mismatches: {notes:?}")
        },
    )
}

/// Desk-scale run settings shared by every seed and loss mode.
fn desk_train_config(seed: u64, mode: LossMode) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        seed,
        loss_mode: mode,
        ..TrainConfig::default()
    }
}

fn desk_model() -> Model {
    Model::build(&ModelConfig {
        width: 0.125,
        input_size: 160,
        in_channels: 1,
        n_classes: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

struct DeskRun {
    val_map: f64,
    tiny_map: f64,
}

fn desk_run(seed: u64, mode: LossMode) -> DeskRun {
    let data = synth_dataset(
        &SynthConfig {
            seed: 1000 + seed,
            ..SynthConfig::default()
        },
        200,
    )
    .unwrap();
    let split = split_dataset(&data.ids(), [0.7, 0.2, 0.1], seed).unwrap();
    let train_set = data.subset(&split.train).unwrap();
    let val = data.subset(&split.val).unwrap();
    let tiny = synth_dataset(
        &SynthConfig {
            seed: 2000 + seed,
            target_size: [4.0, 6.0],
            ..SynthConfig::default()
        },
        60,
    )
    .unwrap();
    let model = desk_model();
    let cfg = desk_train_config(seed, mode);
    let out = train(&model, &train_set, None, &cfg, None, |_| {}).unwrap();
    let eval = EvalConfig::default();
    DeskRun {
        val_map: evaluate_model(&model, &out.store, &val, &eval).unwrap().map50,
        tiny_map: evaluate_model(&model, &out.store, &tiny, &eval).unwrap().map50,
    }
}

fn desk_training() -> Outcome {
    if std::env::var("ISTD_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1") {
        return Outcome {
            pass: None,
            detail: "skipped by ISTD_ACCEPTANCE_SKIP_TRAINING=1".into(),
        };
    }
    let t = Instant::now();
    let mut val = Vec::new();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let mixed = desk_run(seed, LossMode::Mixed);
        let plain = desk_run(seed, LossMode::IouOnly);
        wins += (mixed.tiny_map >= plain.tiny_map) as usize;
        val.push(mixed.val_map);
        lines.push(format!(
            "seed {seed}: val {:.3}, tiny mixed {:.3} vs iou_only {:.3}",
            mixed.val_map, mixed.tiny_map, plain.tiny_map
        ));
    }
    let mut sorted = val.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    let secs = t.elapsed().as_secs_f64();
    for l in &lines {
        println!("    {l}");
    }
    outcome(
        median >= 0.6 && wins >= 4 && secs <= 1800.0,
        format!(
            "median val mAP@0.5 {median:.3} (>= 0.6), tiny mixed >= iou_only in {wins}/5 (>= 4), \
             {secs:.0}s (limit 1800s)"
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.push(("classes.txt".into(), fs::read(dir.join("classes.txt")).unwrap()));
    out
}

/// Everything a command would write, run twice in fresh directories.
fn determinism() -> Outcome {
    let run = || -> Vec<Vec<u8>> {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        let net = build_backbone_with(BackboneVariant::Reconstructed, 1.0, BuildOptions::default()).unwrap();
        out.push(serde_json::to_vec(&module_rows(&net)).unwrap());

        let cfg = SynthConfig {
            img_size: 32,
            seed: 9,
            ..SynthConfig::default()
        };
        let data = synth_dataset(&cfg, 6).unwrap();
        save_dataset(tmp.path(), &data).unwrap();
        out.extend(read_tree(tmp.path()).into_iter().map(|(n, b)| [n.into_bytes(), b].concat()));

        let model = Model::build(&ModelConfig {
            width: 0.125,
            input_size: 32,
            in_channels: 1,
            n_classes: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut log = String::new();
        let trained = train(&model, &data, Some(&data), &tc, None, |r| log.push_str(&r.to_json_line())).unwrap();
        out.push(log.into_bytes());
        let w = tmp.path().join("w.istd");
        save_weights(&trained.store, &w).unwrap();
        out.push(fs::read(&w).unwrap());
        out.push(
            evaluate_model(&model, &trained.store, &data, &EvalConfig::default())
                .unwrap()
                .to_json()
                .into_bytes(),
        );

        let (p, q) = (b(2.0, 2.0, 2.0, 2.0), b(3.0, 3.0, 2.0, 2.0));
        out.push(format!("{:?}", (iou(&p, &q), wasserstein2_boxes(&p, &q), nwd(&p, &q, 2.0).unwrap())).into_bytes());

        let heat = energy_heatmap(&data.samples[0].image, &SimamConfig::default()).unwrap();
        let h = tmp.path().join("heat.pgm");
        save_image(&heat, &h).unwrap();
        out.push(fs::read(&h).unwrap());

        out.push(format!("{:?}", run_suite("nwd", 1).unwrap()).into_bytes());
        out
    };
    let (a, b) = (run(), run());
    let same = a == b;
    outcome(
        same,
        format!("{} artifacts (params, synth files, train log, weights, eval, nwd, heatmap, audit) byte-identical: {same}", a.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("table1 golden counts", table1),
        ("W2 general == closed form", closed_form),
        ("NWD property suite", nwd_properties),
        ("gradient dichotomy", dichotomy),
        ("gradient audits", audits),
        ("SimAM parameter neutrality", simam_neutral),
        ("scale surgery", scale_surgery),
        ("evaluation fixtures", eval_fixtures),
        ("desk-scale training", desk_training),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        let verdict = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {:>2} {verdict} {name}: {}", i + 1, o.detail);
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criterion(s) failed");
    if std::env::var("ISTD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
