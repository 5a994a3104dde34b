//! `istd`: command-line front end for the detector.

mod fmt;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use istd_core::audit::run_suite;
use istd_core::blocks::BuildOptions;
use istd_core::boxes::{iou, nwd, wasserstein2_boxes, BBox};
use istd_core::data::{load_dataset, load_image, save_dataset, save_image, split_dataset, synth_dataset, Dataset, SynthConfig};
use istd_core::eval::{EvalConfig, MatchMetric};
use istd_core::model::{
    build_backbone_with, module_rows, save_weights, BackboneVariant, Model, ModelConfig, ModuleRow, NeckVariant,
    ORIGINAL_TOTAL, RECONSTRUCTED_TOTAL, TABLE1_ROWS,
};
use istd_core::simam::{energy_heatmap, SimamConfig};
use istd_core::train::{evaluate_model, train, LossMode, TrainConfig};
use istd_core::Error;

use crate::fmt::sig;

#[derive(Parser)]
#[command(name = "istd", version, about = "Infrared small-target detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-module and total parameter counts.
    Params(ParamsArgs),
    /// Check the reconstructed backbone against the published per-row counts.
    #[command(name = "verify-table1")]
    VerifyTable1 {
        /// Give every CBS convolution a bias (negative control).
        #[arg(long, hide = true)]
        conv_bias: bool,
    },
    /// Generate a synthetic infrared dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset directory.
    Eval(EvalArgs),
    /// IoU, squared Wasserstein distance and NWD of two boxes.
    Nwd(NwdArgs),
    /// SimAM energy heatmap of an image.
    Simam(SimamArgs),
    /// Finite-difference gradient audits.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Reconstructed,
    Original,
    Ltsn,
    ElanwBaseline,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum, default_value = "reconstructed")]
    variant: Variant,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Only used by the full-model variants.
    #[arg(long, default_value_t = 640)]
    input_size: usize,
    /// Only used by the full-model variants.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// TOML generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    img_size: Option<usize>,
}

#[derive(Args)]
struct ModelFlags {
    /// TOML model settings; the flags below override it.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long, value_enum)]
    neck: Option<NeckArg>,
    #[arg(long)]
    no_simam: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeckArg {
    Ltsn,
    ElanwBaseline,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory: weights, configs, split and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.7,0.2,0.1")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    /// TOML training settings; the flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    iou_ratio: Option<f64>,
    #[arg(long)]
    nwd_c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Iou,
    Nwd,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Which part of the run's split to score; `all` ignores the split.
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, value_enum, default_value = "iou")]
    metric: MetricArg,
    /// NWD constant for `--metric nwd`; defaults to the run's.
    #[arg(long)]
    nwd_c: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NwdArgs {
    /// cx,cy,w,h
    #[arg(long)]
    box_a: String,
    #[arg(long)]
    box_b: String,
    #[arg(long)]
    c: f64,
}

#[derive(Args)]
struct SimamArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = istd_core::simam::DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all, simam, nwd, ciou, blocks or model.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure that maps to exit code 1 rather than a usage error.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Usage-type errors (bad input, missing or malformed files) exit with 2;
/// everything else with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NonFiniteGradient(_) | Error::NonFinite { .. }) => 1,
        _ => 2,
    }
}

/// `ISTD_THREADS` caps internal parallelism. Every kernel currently runs on
/// one thread, so the value is only validated.
fn threads() -> anyhow::Result<usize> {
    match std::env::var("ISTD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("ISTD_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Params(a) => cmd_params(&a),
        Command::VerifyTable1 { conv_bias } => cmd_verify_table1(conv_bias),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Nwd(a) => cmd_nwd(&a),
        Command::Simam(a) => cmd_simam(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn print_rows(rows: &[ModuleRow], total: u64) {
    println!("{:<24} {:<10} {:>6} {:>6} {:>10}", "module", "kind", "c_in", "c_out", "params");
    for r in rows {
        println!("{:<24} {:<10} {:>6} {:>6} {:>10}", r.name, r.kind, r.c_in, r.c_out, r.params);
    }
    println!("total {total}");
}

fn cmd_params(a: &ParamsArgs) -> anyhow::Result<ExitCode> {
    let (name, rows, total) = match a.variant {
        Variant::Reconstructed | Variant::Original => {
            let (v, name) = match a.variant {
                Variant::Reconstructed => (BackboneVariant::Reconstructed, "reconstructed"),
                _ => (BackboneVariant::Original, "original"),
            };
            if !(a.width > 0.0) {
                bail!(Error::Config(format!("width must be positive, got {}", a.width)));
            }
            let net = build_backbone_with(v, a.width, BuildOptions::default())?;
            (name, module_rows(&net), net.param_count())
        }
        Variant::Ltsn | Variant::ElanwBaseline => {
            let (variant, name) = match a.variant {
                Variant::Ltsn => (NeckVariant::Ltsn, "ltsn"),
                _ => (NeckVariant::ElanwBaseline, "elanw-baseline"),
            };
            let model = Model::build(&ModelConfig {
                variant,
                width: a.width,
                input_size: a.input_size,
                n_classes: a.classes,
                ..ModelConfig::default()
            })?;
            (name, module_rows(model.net()), model.count_params())
        }
    };
    match a.format {
        Format::Table => print_rows(&rows, total),
        Format::Json => {
            let report = json!({ "variant": name, "width": a.width, "modules": rows, "total": total });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_table1(conv_bias: bool) -> anyhow::Result<ExitCode> {
    let opts = BuildOptions {
        conv_bias,
        ..BuildOptions::default()
    };
    let net = build_backbone_with(BackboneVariant::Reconstructed, 1.0, opts)?;
    let original = build_backbone_with(BackboneVariant::Original, 1.0, opts)?.param_count();
    let mut ok = true;
    let mut check = |label: String, expected: u64, actual: u64| {
        let pass = expected == actual;
        ok &= pass;
        println!("{label:<28} expected {expected:>9} actual {actual:>9} {}", if pass { "OK" } else { "MISMATCH" });
    };
    for (i, (row, expected)) in module_rows(&net).iter().zip(TABLE1_ROWS).enumerate() {
        check(format!("row {} {} {}", i + 1, row.name, row.kind), expected, row.params);
    }
    check("reconstructed total".into(), RECONSTRUCTED_TOTAL, net.param_count());
    check("original total".into(), ORIGINAL_TOTAL, original);
    let pct = (100.0 * net.param_count() as f64 / original as f64).round() as u64;
    check("ratio percent".into(), 45, pct);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_toml_str(&read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.img_size {
        cfg.img_size = s;
    }
    cfg.validate()?;
    let data = synth_dataset(&cfg, a.count)?;
    save_dataset(&a.out, &data)?;
    let targets: usize = data.samples.iter().map(|s| s.gts.len()).sum();
    println!("{}", json!({ "scenes": data.len(), "targets": targets, "classes": data.classes }));
    Ok(ExitCode::SUCCESS)
}

fn read(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> anyhow::Result<[f64; N]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("{what}: {s:?} is not a comma-separated list of numbers")))?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{what}: expected {N} numbers in {s:?}")).into())
}

fn model_config(flags: &ModelFlags, data: &Dataset, channels: usize) -> anyhow::Result<ModelConfig> {
    let mut cfg = match &flags.model_config {
        Some(p) => ModelConfig::from_toml_str(&read(p)?)?,
        None => ModelConfig::default(),
    };
    let (w, h) = data.samples.first().map(|s| s.size()).ok_or(Error::EmptyDataset)?;
    if w != h || data.samples.iter().any(|s| s.size() != (w, h)) {
        bail!(Error::Config("all images must be square and of one size".into()));
    }
    cfg.input_size = w;
    cfg.in_channels = channels;
    cfg.n_classes = data.classes.len();
    if let Some(v) = flags.width {
        cfg.width = v;
    }
    if let Some(n) = flags.neck {
        cfg.variant = match n {
            NeckArg::Ltsn => NeckVariant::Ltsn,
            NeckArg::ElanwBaseline => NeckVariant::ElanwBaseline,
        };
    }
    if flags.no_simam {
        cfg.simam = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<ExitCode> {
    let data = load_dataset(&a.data, a.channels)?;
    let mcfg = model_config(&a.model, &data, a.channels)?;
    let mut cfg = match &a.train_config {
        Some(p) => toml::from_str::<TrainConfig>(&read(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &a.loss_mode {
        cfg.loss_mode = v.parse::<LossMode>()?;
    }
    if let Some(v) = a.iou_ratio {
        cfg.iou_ratio = v;
    }
    if a.nwd_c.is_some() {
        cfg.nwd_c = a.nwd_c;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let ratios = parse_floats::<3>(&a.split, "--split")?;
    let split = split_dataset(&data.ids(), ratios, a.split_seed)?;
    let train_set = data.subset(&split.train)?;
    let val = data.subset(&split.val)?;
    let model = Model::build(&mcfg)?;

    fs::create_dir_all(&a.out)?;
    let mut log = String::new();
    let out = train(&model, &train_set, Some(&val), &cfg, None, |r| {
        let line = r.to_json_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    let mut saved = cfg.clone();
    saved.nwd_c = Some(out.nwd_c);
    fs::write(a.out.join("log.jsonl"), log)?;
    fs::write(a.out.join("model.toml"), mcfg.to_toml_string()?)?;
    fs::write(a.out.join("train.toml"), toml::to_string(&saved)?)?;
    let split_json = json!({ "train": split.train, "val": split.val, "test": split.test });
    fs::write(a.out.join("split.json"), serde_json::to_string_pretty(&split_json)?)?;
    save_weights(&out.store, &a.out.join("weights.istd"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<ExitCode> {
    let mcfg = ModelConfig::from_toml_str(&read(&a.run.join("model.toml"))?)?;
    let model = Model::build(&mcfg)?;
    let store = model.load_params(&a.run.join("weights.istd"))?;
    let data = load_dataset(&a.data, a.channels)?;
    let data = match a.subset {
        Subset::All => data,
        s => {
            let split: serde_json::Value = serde_json::from_str(&read(&a.run.join("split.json"))?)?;
            let key = match s {
                Subset::Train => "train",
                Subset::Val => "val",
                _ => "test",
            };
            let ids: Vec<String> = serde_json::from_value(split[key].clone())?;
            data.subset(&ids)?
        }
    };
    let metric = match a.metric {
        MetricArg::Iou => MatchMetric::Iou,
        MetricArg::Nwd => {
            let c = match a.nwd_c {
                Some(c) => c,
                None => toml::from_str::<TrainConfig>(&read(&a.run.join("train.toml"))?)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .nwd_c
                    .ok_or_else(|| Error::Config("run has no NWD constant; pass --nwd-c".into()))?,
            };
            MatchMetric::Nwd { c }
        }
    };
    let cfg = EvalConfig {
        conf_thresh: a.conf,
        iou_thresh: a.iou,
        metric,
    };
    let report = evaluate_model(&model, &store, &data, &cfg)?;
    let text = report.to_json();
    println!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, format!("{text}\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_box(s: &str, what: &str) -> anyhow::Result<BBox> {
    let [cx, cy, w, h] = parse_floats::<4>(s, what)?;
    Ok(BBox::checked(cx, cy, w, h)?)
}

fn cmd_nwd(a: &NwdArgs) -> anyhow::Result<ExitCode> {
    let (p, q) = (parse_box(&a.box_a, "--box-a")?, parse_box(&a.box_b, "--box-b")?);
    let n = nwd(&p, &q, a.c)?;
    println!("iou {}", sig(iou(&p, &q)));
    println!("w2_squared {}", sig(wasserstein2_boxes(&p, &q)));
    println!("nwd {}", sig(n));
    Ok(ExitCode::SUCCESS)
}

fn cmd_simam(a: &SimamArgs) -> anyhow::Result<ExitCode> {
    let cfg = SimamConfig::new(a.lambda)?;
    let image = load_image(&a.image, a.channels)?;
    let heat = energy_heatmap(&image, &cfg)?;
    save_image(&heat, &a.out)?;
    let s = heat.shape();
    println!("{}", json!({ "width": s.w, "height": s.h, "out": a.out.display().to_string() }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let lines = run_suite(&a.module, a.seed)?;
    let mut ok = true;
    for l in &lines {
        ok &= l.passes();
        let verdict = if l.passes() { "PASS" } else { "FAIL" };
        println!("{:<18} max_rel_error {} checked {} {verdict}", l.suite, sig(l.max_rel_error), l.checked);
    }
    if !ok {
        return Err(Failed("gradient audit failed".into()).into());
    }
    Ok(ExitCode::SUCCESS)
}
