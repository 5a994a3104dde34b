//! Composite building blocks (CBS, ELAN, ELAN-W, MP-1, GSConv,
//! GS-bottleneck, VoV-GSCSP, SimAM) expressed as a DAG of primitive layers.
//!
//! A [`Net`] is built once by [`NetBuilder`], then used for exact parameter
//! and FLOP accounting and for taped forward passes against a
//! [`ParamStore`].

mod params;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simam::{self, SimamConfig};
use crate::tensor::{BnMode, Graph, RunningStats, Shape, Var};

pub use params::{Bound, ParamStore};

/// Batch-norm epsilon used by every CBS.
pub const BN_EPS: f64 = 1e-3;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "CBS")]
    Cbs,
    #[serde(rename = "ELAN")]
    Elan,
    #[serde(rename = "ELAN_W")]
    ElanW,
    #[serde(rename = "MP1")]
    Mp1,
    GSConv,
    GSBottleneck,
    VoVGSCSP,
    SimAM,
}

impl BlockKind {
    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Cbs => "CBS",
            BlockKind::Elan => "ELAN",
            BlockKind::ElanW => "ELAN-W",
            BlockKind::Mp1 => "MP-1",
            BlockKind::GSConv => "GSConv",
            BlockKind::GSBottleneck => "GS-bottleneck",
            BlockKind::VoVGSCSP => "VoV-GSCSP",
            BlockKind::SimAM => "SimAM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub hidden: Option<usize>,
}

impl BlockSpec {
    fn plain(kind: BlockKind, c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        BlockSpec {
            kind,
            c_in,
            c_out,
            k,
            s,
            hidden: None,
        }
    }

    pub fn cbs(c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        Self::plain(BlockKind::Cbs, c_in, c_out, k, s)
    }

    pub fn elan(c_in: usize, hidden: usize, c_out: usize) -> Self {
        BlockSpec {
            hidden: Some(hidden),
            ..Self::plain(BlockKind::Elan, c_in, c_out, 3, 1)
        }
    }

    pub fn elan_w(c_in: usize, hidden: usize, c_out: usize) -> Self {
        BlockSpec {
            hidden: Some(hidden),
            ..Self::plain(BlockKind::ElanW, c_in, c_out, 3, 1)
        }
    }

    pub fn mp1(c: usize) -> Self {
        Self::plain(BlockKind::Mp1, c, c, 3, 2)
    }

    pub fn gsconv(c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        Self::plain(BlockKind::GSConv, c_in, c_out, k, s)
    }

    pub fn gs_bottleneck(c_in: usize, c_out: usize) -> Self {
        Self::plain(BlockKind::GSBottleneck, c_in, c_out, 3, 1)
    }

    pub fn vov_gscsp(c_in: usize, c_out: usize) -> Self {
        Self::plain(BlockKind::VoVGSCSP, c_in, c_out, 1, 1)
    }

    pub fn simam(c: usize) -> Self {
        Self::plain(BlockKind::SimAM, c, c, 1, 1)
    }

    /// Standalone sub-graph with one input of `c_in` channels.
    pub fn build(&self) -> Result<Net> {
        self.build_with(BuildOptions::default())
    }

    pub fn build_with(&self, opts: BuildOptions) -> Result<Net> {
        let mut b = NetBuilder::new(opts);
        let x = b.input(self.c_in);
        let y = b.block("block", *self, x)?;
        b.output("out", y);
        Ok(b.finish())
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("block", format!("{}: {d}", self.kind.label())));
        if self.c_in == 0 || self.c_out == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.k == 0 || self.s == 0 {
            return bad("kernel and stride must be positive".into());
        }
        let even = |c: usize| c % 2 == 0;
        match self.kind {
            BlockKind::Elan | BlockKind::ElanW => {
                let h = self.hidden.unwrap_or(0);
                if h == 0 || self.c_out != 4 * h {
                    return bad(format!("c_out {} must equal 4 * hidden ({h})", self.c_out));
                }
            }
            BlockKind::Mp1 if !even(self.c_in) || self.c_in != self.c_out => {
                return bad(format!("needs an even channel count, got {}", self.c_in));
            }
            BlockKind::GSConv | BlockKind::GSBottleneck | BlockKind::VoVGSCSP if !even(self.c_out) => {
                return bad(format!("c_out must be even, got {}", self.c_out));
            }
            // the inner GS-bottleneck runs at c_out / 2, which must itself be even
            BlockKind::VoVGSCSP if self.c_out % 4 != 0 => {
                return bad(format!("c_out must be a multiple of 4, got {}", self.c_out));
            }
            BlockKind::SimAM if self.c_in != self.c_out => {
                return bad("SimAM preserves channels".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Switches used to build variants of the same topology.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    /// Give every CBS convolution a bias (a deliberately wrong variant).
    pub conv_bias: bool,
    /// `None` replaces every SimAM by an identity.
    pub simam: Option<SimamConfig>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            conv_bias: false,
            simam: Some(SimamConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Depthwise when true (groups = channels, `c_in == c_out`).
    pub depthwise: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> Shape {
        let per_group = if self.depthwise { 1 } else { self.c_in };
        Shape::new(self.c_out, per_group, self.k, self.k)
    }

    pub fn param_count(&self) -> u64 {
        self.weight_shape().numel() as u64 + if self.bias { self.c_out as u64 } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    /// The `i`-th external input, with its channel count.
    Input { index: usize, c: usize },
    Conv(ConvSpec),
    BatchNorm { name: String, c: usize },
    Silu,
    MaxPool { k: usize, stride: usize },
    Upsample2x,
    Concat,
    Shuffle { groups: usize },
    Simam(SimamConfig),
    Identity,
}

impl Prim {
    pub fn param_count(&self) -> u64 {
        match self {
            Prim::Conv(c) => c.param_count(),
            Prim::BatchNorm { c, .. } => 2 * *c as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub prim: Prim,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRecord {
    pub name: String,
    pub spec: BlockSpec,
    pub nodes: Range<usize>,
}

/// Declared parameter: name, shape and whether it is a conv weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: ParamInit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Uniform in ±1/sqrt(fan_in).
    Conv { fan_in: usize },
    Const(f64),
}

/// How batch norms run during a forward pass.
pub enum BnState<'a> {
    Train {
        running: Option<&'a mut BTreeMap<String, RunningStats>>,
        momentum: f64,
    },
    Eval(&'a BTreeMap<String, RunningStats>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Net {
    nodes: Vec<Node>,
    modules: Vec<ModuleRecord>,
    outputs: Vec<(String, NodeId)>,
    n_inputs: usize,
}

impl Net {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn modules(&self) -> &[ModuleRecord] {
        &self.modules
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.prim.param_count()).sum()
    }

    pub fn module_param_count(&self, m: &ModuleRecord) -> u64 {
        self.nodes[m.nodes.clone()].iter().map(|n| n.prim.param_count()).sum()
    }

    pub fn count_kind(&self, kind: BlockKind) -> usize {
        self.modules.iter().filter(|m| m.spec.kind == kind).count()
    }

    pub fn simam_layers(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.prim, Prim::Simam(_))).count()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.prim {
                Prim::Conv(c) => {
                    let shape = c.weight_shape();
                    out.push(ParamSpec {
                        name: format!("{}.weight", c.name),
                        shape,
                        init: ParamInit::Conv {
                            fan_in: shape.c * c.k * c.k,
                        },
                    });
                    if c.bias {
                        out.push(ParamSpec {
                            name: format!("{}.bias", c.name),
                            shape: Shape::new(c.c_out, 1, 1, 1),
                            init: ParamInit::Const(0.0),
                        });
                    }
                }
                Prim::BatchNorm { name, c } => {
                    for (suffix, v) in [("weight", 1.0), ("bias", 0.0)] {
                        out.push(ParamSpec {
                            name: format!("{name}.{suffix}"),
                            shape: Shape::new(*c, 1, 1, 1),
                            init: ParamInit::Const(v),
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Names and widths of every batch norm, for running statistics.
    pub fn batchnorms(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.prim {
                Prim::BatchNorm { name, c } => Some((name.clone(), *c)),
                _ => None,
            })
            .collect()
    }

    pub fn infer_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::shape("net", format!("expected {} inputs, got {}", self.n_inputs, inputs.len())));
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let first = node.inputs.first().map(|&i| shapes[i]);
            let s = match &node.prim {
                Prim::Input { index, c } => {
                    let s = inputs[*index];
                    if s.c != *c {
                        return Err(Error::shape("net", format!("input {index} has {} channels, expected {c}", s.c)));
                    }
                    s
                }
                Prim::Conv(c) => {
                    let x = first.unwrap();
                    if x.c != c.c_in {
                        return Err(Error::shape("conv", format!("{}: got {} channels, expected {}", c.name, x.c, c.c_in)));
                    }
                    let oh = (x.h + 2 * c.padding).checked_sub(c.k).map(|v| v / c.stride + 1);
                    let ow = (x.w + 2 * c.padding).checked_sub(c.k).map(|v| v / c.stride + 1);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Shape::new(x.n, c.c_out, oh, ow),
                        _ => return Err(Error::shape("conv", format!("{}: input {x} too small", c.name))),
                    }
                }
                Prim::MaxPool { k, stride } => {
                    let x = first.unwrap();
                    if x.h < *k || x.w < *k {
                        return Err(Error::shape("maxpool", format!("input {x} smaller than window {k}")));
                    }
                    Shape::new(x.n, x.c, (x.h - k) / stride + 1, (x.w - k) / stride + 1)
                }
                Prim::Upsample2x => {
                    let x = first.unwrap();
                    Shape::new(x.n, x.c, 2 * x.h, 2 * x.w)
                }
                Prim::Concat => {
                    let x = first.unwrap();
                    let mut c = 0;
                    for &i in &node.inputs {
                        let s = shapes[i];
                        if (s.n, s.h, s.w) != (x.n, x.h, x.w) {
                            return Err(Error::shape("concat", format!("{s} does not match {x}")));
                        }
                        c += s.c;
                    }
                    Shape::new(x.n, c, x.h, x.w)
                }
                _ => first.unwrap(),
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn output_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>> {
        let shapes = self.infer_shapes(inputs)?;
        Ok(self.outputs.iter().map(|(_, id)| shapes[*id]).collect())
    }

    /// FLOPs per node: twice the multiply-accumulates of convolutions, one
    /// per output element for bias, normalization, activation and attention,
    /// one per window element for pooling. Data movement counts zero.
    pub fn node_flops(&self, inputs: &[Shape]) -> Result<Vec<u64>> {
        let shapes = self.infer_shapes(inputs)?;
        Ok(self
            .nodes
            .iter()
            .zip(&shapes)
            .map(|(node, s)| {
                let out = s.numel() as u64;
                match &node.prim {
                    Prim::Conv(c) => {
                        let per_out = (c.weight_shape().c * c.k * c.k) as u64;
                        2 * per_out * out + if c.bias { out } else { 0 }
                    }
                    Prim::BatchNorm { .. } | Prim::Silu | Prim::Simam(_) => out,
                    Prim::MaxPool { k, .. } => (k * k) as u64 * out,
                    _ => 0,
                }
            })
            .collect())
    }

    pub fn flops(&self, inputs: &[Shape]) -> Result<u64> {
        Ok(self.node_flops(inputs)?.iter().sum())
    }

    /// Taped forward pass; returns one value per declared output.
    pub fn forward(&self, g: &mut Graph, params: &Bound, inputs: &[Var], mut bn: BnState<'_>) -> Result<Vec<Var>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::shape("net", format!("expected {} inputs, got {}", self.n_inputs, inputs.len())));
        }
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let x = node.inputs.first().map(|&i| vals[i]);
            let v = match &node.prim {
                Prim::Input { index, c } => {
                    let v = inputs[*index];
                    if g.shape(v).c != *c {
                        return Err(Error::shape("net", format!("input {index} has {} channels, expected {c}", g.shape(v).c)));
                    }
                    v
                }
                Prim::Conv(c) => {
                    let w = params.get(&format!("{}.weight", c.name))?;
                    if c.depthwise {
                        g.depthwise_conv2d(x.unwrap(), w, c.stride, c.padding)?
                    } else {
                        let b = if c.bias {
                            Some(params.get(&format!("{}.bias", c.name))?)
                        } else {
                            None
                        };
                        g.conv2d(x.unwrap(), w, b, c.stride, c.padding)?
                    }
                }
                Prim::BatchNorm { name, .. } => {
                    let gamma = params.get(&format!("{name}.weight"))?;
                    let beta = params.get(&format!("{name}.bias"))?;
                    let mode = match &mut bn {
                        BnState::Train { running, momentum } => BnMode::Train {
                            running: match running {
                                Some(map) => Some(map.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?),
                                None => None,
                            },
                            momentum: *momentum,
                        },
                        BnState::Eval(map) => BnMode::Eval {
                            running: map.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?,
                        },
                    };
                    g.batchnorm2d(x.unwrap(), gamma, beta, BN_EPS, mode)?
                }
                Prim::Silu => g.silu(x.unwrap())?,
                Prim::MaxPool { k, stride } => g.maxpool2d(x.unwrap(), *k, *stride)?,
                Prim::Upsample2x => g.upsample_nearest2x(x.unwrap())?,
                Prim::Concat => {
                    let xs: Vec<Var> = node.inputs.iter().map(|&i| vals[i]).collect();
                    g.concat_channels(&xs)?
                }
                Prim::Shuffle { groups } => g.channel_shuffle(x.unwrap(), *groups)?,
                Prim::Simam(cfg) => simam::simam(g, x.unwrap(), cfg)?,
                Prim::Identity => x.unwrap(),
            };
            vals.push(v);
        }
        Ok(self.outputs.iter().map(|(_, id)| vals[*id]).collect())
    }
}

/// Appends primitives and blocks to a [`Net`].
pub struct NetBuilder {
    net: Net,
    opts: BuildOptions,
}

impl NetBuilder {
    pub fn new(opts: BuildOptions) -> Self {
        NetBuilder {
            net: Net::default(),
            opts,
        }
    }

    pub fn options(&self) -> BuildOptions {
        self.opts
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.net.nodes[id].channels
    }

    fn push(&mut self, prim: Prim, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.net.nodes.push(Node { prim, inputs, channels });
        self.net.nodes.len() - 1
    }

    pub fn input(&mut self, c: usize) -> NodeId {
        let index = self.net.n_inputs;
        self.net.n_inputs += 1;
        self.push(Prim::Input { index, c }, vec![], c)
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.net.outputs.push((name.to_string(), id));
    }

    pub fn finish(self) -> Net {
        self.net
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.push(Prim::Concat, xs.to_vec(), c)
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Prim::Upsample2x, vec![x], c)
    }

    /// Plain convolution with bias and no normalization (detection heads).
    pub fn conv(&mut self, name: &str, x: NodeId, c_out: usize, k: usize) -> NodeId {
        let spec = ConvSpec {
            name: name.to_string(),
            c_in: self.channels(x),
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            depthwise: false,
            bias: true,
        };
        self.push(Prim::Conv(spec), vec![x], c_out)
    }

    fn conv_bn_silu(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, s: usize, depthwise: bool) -> NodeId {
        let c_in = self.channels(x);
        let spec = ConvSpec {
            name: format!("{name}.conv"),
            c_in,
            c_out,
            k,
            stride: s,
            padding: k / 2,
            depthwise,
            bias: self.opts.conv_bias,
        };
        let conv = self.push(Prim::Conv(spec), vec![x], c_out);
        let bn = self.push(
            Prim::BatchNorm {
                name: format!("{name}.bn"),
                c: c_out,
            },
            vec![conv],
            c_out,
        );
        self.push(Prim::Silu, vec![bn], c_out)
    }

    fn cbs(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, s: usize) -> NodeId {
        self.conv_bn_silu(name, x, c_out, k, s, false)
    }

    fn gsconv(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, s: usize) -> NodeId {
        let half = c_out / 2;
        let dense = self.cbs(&format!("{name}.cv1"), x, half, k, s);
        let depth = self.conv_bn_silu(&format!("{name}.cv2"), dense, half, 3, 1, true);
        let cat = self.concat(&[dense, depth]);
        self.push(Prim::Shuffle { groups: 2 }, vec![cat], c_out)
    }

    fn gs_bottleneck(&mut self, name: &str, x: NodeId, c_out: usize) -> NodeId {
        let a = self.gsconv(&format!("{name}.gs1"), x, c_out, 1, 1);
        self.gsconv(&format!("{name}.gs2"), a, c_out, 3, 1)
    }

    fn vov_gscsp(&mut self, name: &str, x: NodeId, c_out: usize) -> NodeId {
        let half = c_out / 2;
        let a = self.cbs(&format!("{name}.cv1"), x, half, 1, 1);
        let a = self.gs_bottleneck(&format!("{name}.m"), a, half);
        let b = self.cbs(&format!("{name}.cv2"), x, half, 1, 1);
        let cat = self.concat(&[a, b]);
        self.cbs(&format!("{name}.cv3"), cat, c_out, 1, 1)
    }

    fn elan(&mut self, name: &str, x: NodeId, hidden: usize, c_out: usize) -> NodeId {
        let s1 = self.cbs(&format!("{name}.cv1"), x, hidden, 1, 1);
        let s2 = self.cbs(&format!("{name}.cv2"), x, hidden, 1, 1);
        let mut taps = vec![s1, s2];
        let mut y = s2;
        for i in 0..4 {
            y = self.cbs(&format!("{name}.cv{}", i + 3), y, hidden, 3, 1);
            if i % 2 == 1 {
                taps.push(y);
            }
        }
        let cat = self.concat(&taps);
        self.cbs(&format!("{name}.cv7"), cat, c_out, 1, 1)
    }

    /// Neck-style ELAN: stems at `2 * hidden`, every 3x3 output tapped.
    fn elan_w(&mut self, name: &str, x: NodeId, hidden: usize, c_out: usize) -> NodeId {
        let s1 = self.cbs(&format!("{name}.cv1"), x, 2 * hidden, 1, 1);
        let s2 = self.cbs(&format!("{name}.cv2"), x, 2 * hidden, 1, 1);
        let mut taps = vec![s1, s2];
        let mut y = s2;
        for i in 0..4 {
            y = self.cbs(&format!("{name}.cv{}", i + 3), y, hidden, 3, 1);
            taps.push(y);
        }
        let cat = self.concat(&taps);
        self.cbs(&format!("{name}.cv7"), cat, c_out, 1, 1)
    }

    fn mp1(&mut self, name: &str, x: NodeId) -> NodeId {
        let half = self.channels(x) / 2;
        let pool = self.push(Prim::MaxPool { k: 2, stride: 2 }, vec![x], 2 * half);
        let a = self.cbs(&format!("{name}.cv1"), pool, half, 1, 1);
        let b = self.cbs(&format!("{name}.cv2"), x, half, 1, 1);
        let b = self.cbs(&format!("{name}.cv3"), b, half, 3, 2);
        self.concat(&[a, b])
    }

    /// SimAM, or an identity when the build options disable it.
    fn simam(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        match self.opts.simam {
            Some(cfg) => self.push(Prim::Simam(cfg), vec![x], c),
            None => self.push(Prim::Identity, vec![x], c),
        }
    }

    /// Appends a block after checking its spec against the input width.
    pub fn block(&mut self, name: &str, spec: BlockSpec, x: NodeId) -> Result<NodeId> {
        spec.validate()?;
        if self.channels(x) != spec.c_in {
            return Err(Error::shape(
                "block",
                format!("{name}: input has {} channels, spec expects {}", self.channels(x), spec.c_in),
            ));
        }
        let start = self.net.nodes.len();
        let y = match spec.kind {
            BlockKind::Cbs => self.cbs(name, x, spec.c_out, spec.k, spec.s),
            BlockKind::Elan => self.elan(name, x, spec.hidden.unwrap(), spec.c_out),
            BlockKind::ElanW => self.elan_w(name, x, spec.hidden.unwrap(), spec.c_out),
            BlockKind::Mp1 => self.mp1(name, x),
            BlockKind::GSConv => self.gsconv(name, x, spec.c_out, spec.k, spec.s),
            BlockKind::GSBottleneck => self.gs_bottleneck(name, x, spec.c_out),
            BlockKind::VoVGSCSP => self.vov_gscsp(name, x, spec.c_out),
            BlockKind::SimAM => self.simam(x),
        };
        self.net.modules.push(ModuleRecord {
            name: name.to_string(),
            spec,
            nodes: start..self.net.nodes.len(),
        });
        Ok(y)
    }
}
