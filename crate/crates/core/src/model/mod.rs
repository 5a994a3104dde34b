//! The detector: reconstructed CSPDarkNet backbone, lightweight three-scale
//! neck (LTSN) with SimAM, and anchor-based heads at strides 4, 8 and 16.

mod anchors;
mod weights;
#[cfg(test)]
mod tests;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, BnState, Bound, BuildOptions, Net, NetBuilder, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::simam::SimamConfig;
use crate::tensor::{Graph, Shape, Tensor, Var};

pub use anchors::{decode, AnchorSet, Detection};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC};

/// Strides of the three prediction maps.
pub const STRIDES: [usize; 3] = [4, 8, 16];

pub const SCALE_NAMES: [&str; 3] = ["p2", "p3", "p4"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// The nine-row backbone ending at stride 16.
    Reconstructed,
    /// The stock backbone continuing to stride 32, kept for comparison.
    Original,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckVariant {
    Ltsn,
    /// ELAN-W in place of every VoV-GSCSP, no SimAM.
    ElanwBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: NeckVariant,
    pub width: f64,
    pub input_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    /// `false` swaps the neck's SimAM layers for identities.
    pub simam: bool,
    pub simam_lambda: f64,
    pub anchors: AnchorSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: NeckVariant::Ltsn,
            width: 1.0,
            input_size: 640,
            in_channels: 3,
            n_classes: 5,
            simam: true,
            simam_lambda: crate::simam::DEFAULT_LAMBDA,
            anchors: AnchorSet::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(d));
        if !(self.width > 0.0 && self.width <= 4.0) {
            return bad(format!("width must lie in (0, 4], got {}", self.width));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        if self.in_channels == 0 || self.n_classes == 0 {
            return bad("in_channels and n_classes must be positive".into());
        }
        SimamConfig::new(self.simam_lambda)?;
        self.anchors.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Channels per anchor: box (4), objectness (1), classes.
    pub fn per_anchor(&self) -> usize {
        5 + self.n_classes
    }
}

/// Channel count under a width multiplier: a multiple of 4, at least 4.
pub fn scale_channels(c: usize, width: f64) -> usize {
    if width == 1.0 {
        return c;
    }
    (((c as f64 * width) / 4.0).round() as usize).max(1) * 4
}

pub struct Taps {
    pub p2: NodeId,
    pub p3: NodeId,
    pub p4: NodeId,
    pub p5: Option<NodeId>,
}

/// Appends the backbone rows; names are `backbone.<row>`.
pub fn add_backbone(b: &mut NetBuilder, x: NodeId, variant: BackboneVariant, width: f64) -> Result<Taps> {
    let s = |c| scale_channels(c, width);
    let c_in = b.channels(x);
    let mut y = b.block("backbone.0", BlockSpec::cbs(c_in, s(32), 3, 1), x)?;
    y = b.block("backbone.1", BlockSpec::cbs(s(32), s(64), 3, 2), y)?;
    y = b.block("backbone.2", BlockSpec::cbs(s(64), s(64), 3, 1), y)?;
    y = b.block("backbone.3", BlockSpec::cbs(s(64), s(128), 3, 2), y)?;
    let elan = |b: &mut NetBuilder, name: &str, x: NodeId, hidden: usize| {
        let c = b.channels(x);
        b.block(name, BlockSpec::elan(c, s(hidden), 4 * s(hidden)), x)
    };
    let mp1 = |b: &mut NetBuilder, name: &str, x: NodeId| {
        let c = b.channels(x);
        b.block(name, BlockSpec::mp1(c), x)
    };
    let p2 = elan(b, "backbone.4", y, 64)?;
    y = mp1(b, "backbone.5", p2)?;
    let p3 = elan(b, "backbone.6", y, 128)?;
    y = mp1(b, "backbone.7", p3)?;
    let p4 = elan(b, "backbone.8", y, 256)?;
    let p5 = match variant {
        BackboneVariant::Reconstructed => None,
        BackboneVariant::Original => {
            let y = mp1(b, "backbone.9", p4)?;
            Some(elan(b, "backbone.10", y, 256)?)
        }
    };
    Ok(Taps { p2, p3, p4, p5 })
}

/// Full-width backbone on a 3-channel image, with its taps as outputs.
pub fn build_backbone(variant: BackboneVariant, input_size: usize) -> Result<Net> {
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::Config(format!("input_size must be a positive multiple of 32, got {input_size}")));
    }
    build_backbone_with(variant, 1.0, BuildOptions::default())
}

/// Backbone on a 3-channel image at any width and build options.
pub fn build_backbone_with(variant: BackboneVariant, width: f64, opts: BuildOptions) -> Result<Net> {
    let mut b = NetBuilder::new(opts);
    let x = b.input(3);
    let taps = add_backbone(&mut b, x, variant, width)?;
    b.output("p2", taps.p2);
    b.output("p3", taps.p3);
    b.output("p4", taps.p4);
    if let Some(p5) = taps.p5 {
        b.output("p5", p5);
    }
    Ok(b.finish())
}

/// Per-row parameter counts of the reconstructed backbone.
pub const TABLE1_ROWS: [u64; 9] = [928, 18560, 36992, 73984, 230656, 213760, 920064, 853504, 3675136];
pub const RECONSTRUCTED_TOTAL: u64 = 6_023_584;
pub const ORIGINAL_TOTAL: u64 = 13_371_808;

/// Appends the neck; returns the P2, P3 and P4 outputs.
pub fn add_neck(b: &mut NetBuilder, taps: &Taps, variant: NeckVariant, width: f64) -> Result<[NodeId; 3]> {
    let s = |c| scale_channels(c, width);
    let merge = |b: &mut NetBuilder, name: &str, x: NodeId, c_out: usize| {
        let c_in = b.channels(x);
        match variant {
            NeckVariant::Ltsn => b.block(name, BlockSpec::vov_gscsp(c_in, c_out), x),
            NeckVariant::ElanwBaseline => b.block(name, BlockSpec::elan_w(c_in, c_out / 4, c_out), x),
        }
    };
    let attend = |b: &mut NetBuilder, name: &str, x: NodeId| match variant {
        NeckVariant::Ltsn => {
            let c = b.channels(x);
            b.block(name, BlockSpec::simam(c), x)
        }
        NeckVariant::ElanwBaseline => Ok(x),
    };
    let cbs = |b: &mut NetBuilder, name: &str, x: NodeId, c_out: usize| {
        let c_in = b.channels(x);
        b.block(name, BlockSpec::cbs(c_in, c_out, 1, 1), x)
    };

    let r4 = cbs(b, "neck.reduce_p4", taps.p4, s(256))?;
    let a4 = attend(b, "neck.simam_p4", r4)?;
    let u4 = b.upsample(a4);
    let r3 = cbs(b, "neck.reduce_p3", taps.p3, s(256))?;
    let cat = b.concat(&[u4, r3]);
    let n3 = merge(b, "neck.merge_p3", cat, s(256))?;

    let r3b = cbs(b, "neck.reduce_n3", n3, s(128))?;
    let a3 = attend(b, "neck.simam_n3", r3b)?;
    let u3 = b.upsample(a3);
    let r2 = cbs(b, "neck.reduce_p2", taps.p2, s(128))?;
    let cat = b.concat(&[u3, r2]);
    let o2 = merge(b, "neck.out_p2", cat, s(128))?;

    let c = b.channels(o2);
    let d2 = b.block("neck.down_p2", BlockSpec::gsconv(c, c, 3, 2), o2)?;
    let cat = b.concat(&[d2, n3]);
    let o3 = merge(b, "neck.out_p3", cat, s(256))?;

    let c = b.channels(o3);
    let d3 = b.block("neck.down_p3", BlockSpec::gsconv(c, c, 3, 2), o3)?;
    let cat = b.concat(&[d3, r4]);
    let o4 = merge(b, "neck.out_p4", cat, s(512))?;
    Ok([o2, o3, o4])
}

/// One row of the per-module parameter report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleRow {
    pub name: String,
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub params: u64,
}

pub fn module_rows(net: &Net) -> Vec<ModuleRow> {
    net.modules()
        .iter()
        .map(|m| ModuleRow {
            name: m.name.clone(),
            kind: m.spec.kind.label().to_string(),
            c_in: m.spec.c_in,
            c_out: m.spec.c_out,
            params: net.module_param_count(m),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    net: Net,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let opts = BuildOptions {
            conv_bias: false,
            simam: config.simam.then_some(SimamConfig::new(config.simam_lambda)?),
        };
        let mut b = NetBuilder::new(opts);
        let x = b.input(config.in_channels);
        let taps = add_backbone(&mut b, x, BackboneVariant::Reconstructed, config.width)?;
        let outs = add_neck(&mut b, &taps, config.variant, config.width)?;
        let per_scale = 3 * config.per_anchor();
        for (name, o) in SCALE_NAMES.iter().zip(outs) {
            let h = b.conv(&format!("head.{name}"), o, per_scale, 1);
            b.output(name, h);
        }
        Ok(Model {
            config: config.clone(),
            net: b.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let s = self.config.input_size;
        Shape::new(batch, self.config.in_channels, s, s)
    }

    pub fn count_params(&self) -> u64 {
        self.net.param_count()
    }

    pub fn count_flops(&self) -> Result<u64> {
        self.net.flops(&[self.input_shape(1)])
    }

    pub fn output_shapes(&self, batch: usize) -> Result<Vec<Shape>> {
        self.net.output_shapes(&[self.input_shape(batch)])
    }

    /// Seeded parameters. Head biases start at the usual priors: a low
    /// objectness (about 8 objects per 640-px image) and a flat class prior.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::init(&self.net, seed);
        let (na, nc) = (self.config.per_anchor(), self.config.n_classes);
        for (name, stride) in SCALE_NAMES.iter().zip(STRIDES) {
            let cells = (self.config.input_size as f64 / stride as f64).powi(2);
            let obj = (8.0 * (self.config.input_size as f64 / 640.0).powi(2) / cells).ln();
            let cls = (0.6 / (nc as f64 - 0.99)).ln();
            let bias = store.get_mut(&format!("head.{name}.bias")).expect("head bias declared");
            for a in 0..3 {
                bias.data_mut()[a * na + 4] = obj;
                for j in 0..nc {
                    bias.data_mut()[a * na + 5 + j] = cls;
                }
            }
        }
        store
    }

    /// Taped forward pass; returns the raw maps at strides 4, 8, 16.
    pub fn forward(&self, g: &mut Graph, params: &Bound, x: Var, bn: BnState<'_>) -> Result<Vec<Var>> {
        let s = g.shape(x);
        let want = self.input_shape(s.n);
        if s != want {
            return Err(Error::shape("model", format!("batch {s} does not match model input {want}")));
        }
        self.net.forward(g, params, &[x], bn)
    }

    /// Eval-mode raw predictions.
    pub fn predict(&self, store: &ParamStore, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(batch.clone(), false);
        let outs = self.forward(&mut g, &p, x, BnState::Eval(&store.running))?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Eval-mode detections per batch item, before NMS.
    pub fn detect(&self, store: &ParamStore, batch: &Tensor, conf_thresh: f64) -> Result<Vec<Vec<Detection>>> {
        let raw = self.predict(store, batch)?;
        let size = self.config.input_size as f64;
        decode(&raw, &self.config.anchors, &STRIDES, self.config.n_classes, conf_thresh, (size, size))
    }

    pub fn load_params(&self, path: &Path) -> Result<ParamStore> {
        let store = load_weights(path)?;
        store.check_against(&self.net)?;
        Ok(store)
    }
}
