use std::fmt;

use super::ops::{self, BatchStats};
use super::{Precision, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator family, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    DepthwiseConv2d,
    BatchNorm,
    MaxPool,
    Upsample,
    Concat,
    Silu,
    Sigmoid,
    Shuffle,
    Add,
    Mul,
    Scale,
    Sum,
    Custom(&'static str),
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Custom(name) => f.write_str(name),
            other => write!(f, "{other:?}"),
        }
    }
}

/// A differentiable operator defined outside the tape.
///
/// The tape stores the forward output; `backward` maps the gradient of that
/// output to gradients of each input (`None` for inputs it does not feed).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

/// Deliberately scales the input gradients of one operator family.
///
/// Exists so that gradient audits can be shown to fail on a broken rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultInjection {
    pub kind: OpKind,
    pub scale: f64,
}

/// Batch-norm running statistics. State, not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * stats.var[c] * unbias;
        }
    }
}

pub enum BnMode<'a> {
    /// Normalize by batch statistics, optionally folding them into running stats.
    Train {
        running: Option<&'a mut RunningStats>,
        momentum: f64,
    },
    /// Normalize by running statistics.
    Eval { running: &'a RunningStats },
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Silu {
        input: Var,
        sig: Tensor,
    },
    Sigmoid {
        input: Var,
    },
    Shuffle {
        input: Var,
        groups: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat { .. } => OpKind::Concat,
            Op::Silu { .. } => OpKind::Silu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Shuffle { .. } => OpKind::Shuffle,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Custom { op, .. } => OpKind::Custom(op.name()),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; zero when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Reverse-mode tape. Every op appends a node; `backward` walks the nodes in
/// reverse insertion order, which is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
    fault: Option<FaultInjection>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Graph::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// When set, any op producing a non-finite value fails with the op's name.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn inject_fault(&mut self, fault: Option<FaultInjection>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.kind().to_string() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        )
    }

    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.any_grad(&[input, weight]);
        self.push(
            out,
            Op::Depthwise {
                input,
                weight,
                stride,
                padding,
            },
            rg,
        )
    }

    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, eps: f64, mode: BnMode<'_>) -> Result<Var> {
        let rg = self.any_grad(&[input, gamma, beta]);
        match mode {
            BnMode::Train { running, momentum } => {
                let r = ops::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
                if let Some(running) = running {
                    if running.mean.len() != r.stats.mean.len() {
                        return Err(Error::shape("batchnorm2d", "running statistics do not match channel count"));
                    }
                    running.update(&r.stats, momentum);
                }
                self.push(
                    r.output,
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        xhat: r.xhat,
                        inv_std: r.inv_std,
                        train: true,
                    },
                    rg,
                )
            }
            BnMode::Eval { running } => {
                let (out, inv_std) = ops::batchnorm_eval(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    eps,
                    &running.mean,
                    &running.var,
                )?;
                let xhat = if rg {
                    let s = self.shape(input);
                    let x = self.value(input).data();
                    let mut xhat = vec![0.0; x.len()];
                    for b in 0..s.n {
                        for c in 0..s.c {
                            let off = (b * s.c + c) * s.plane();
                            for i in off..off + s.plane() {
                                xhat[i] = (x[i] - running.mean[c]) * inv_std[c];
                            }
                        }
                    }
                    xhat
                } else {
                    Vec::new()
                };
                self.push(
                    out,
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                        train: false,
                    },
                    rg,
                )
            }
        }
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), k, stride)?;
        let rg = self.any_grad(&[input]);
        self.push(out, Op::MaxPool { input, argmax }, rg)
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample_nearest2x(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Upsample { input }, rg)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = self.any_grad(inputs);
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let (out, sig) = ops::silu_with_sigmoid(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Silu { input, sig }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn channel_shuffle(&mut self, input: Var, groups: usize) -> Result<Var> {
        let out = ops::channel_shuffle(self.value(input), groups)?;
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Shuffle { input, groups }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_map(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_map(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = ops::map(self.value(input), |x| x * factor);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output. Returns gradients of every leaf
    /// that requires them; intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape.numel() != 1 {
            return Err(Error::NonScalarBackward(out_shape.to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::full(out_shape, 1.0));
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.backward_node(node, &g)?;
            if let Some(fault) = self.fault {
                if fault.kind == node.op.kind() {
                    for (_, t) in contributions.iter_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v *= fault.scale);
                    }
                }
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need_input = self.requires_grad(*input);
                let r = ops::conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *padding, need_input)?;
                if let Some(dx) = r.input {
                    out.push((*input, dx));
                }
                out.push((*weight, r.weight));
                if let Some(b) = bias {
                    out.push((*b, r.bias.reshape(self.shape(*b))?));
                }
            }
            Op::Depthwise {
                input,
                weight,
                stride,
                padding,
            } => {
                let need_input = self.requires_grad(*input);
                let (dx, dw) =
                    ops::depthwise_conv2d_backward(self.value(*input), self.value(*weight), g, *stride, *padding, need_input)?;
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*weight, dw));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*input);
                let (dx, dg, db) = ops::batchnorm_backward(s, g.data(), self.value(*gamma).data(), xhat, inv_std, *train);
                out.push((*input, Tensor::from_vec(s, dx)?));
                out.push((*gamma, Tensor::vector(dg).reshape(self.shape(*gamma))?));
                out.push((*beta, Tensor::vector(db).reshape(self.shape(*beta))?));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                let d = dx.data_mut();
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                out.push((*input, dx));
            }
            Op::Upsample { input } => {
                out.push((*input, ops::upsample_nearest2x_backward(g, self.shape(*input))));
            }
            Op::Concat { inputs } => {
                let channels: Vec<usize> = inputs.iter().map(|v| self.shape(*v).c).collect();
                for (v, t) in inputs.iter().zip(ops::concat_backward(g, &channels)) {
                    out.push((*v, t));
                }
            }
            Op::Silu { input, sig } => {
                let dx = ops::zip3_map(self.value(*input), sig, g, |x, s, gy| gy * s * (1.0 + x * (1.0 - s)));
                out.push((*input, dx));
            }
            Op::Sigmoid { input } => {
                let dx = ops::zip_map(&node.value, g, "sigmoid", |y, gy| gy * y * (1.0 - y))?;
                out.push((*input, dx));
            }
            Op::Shuffle { input, groups } => {
                out.push((*input, ops::channel_unshuffle(g, *groups)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                out.push((*a, ops::zip_map(g, self.value(*b), "mul", |x, y| x * y)?));
                out.push((*b, ops::zip_map(g, self.value(*a), "mul", |x, y| x * y)?));
            }
            Op::Scale { input, factor } => {
                out.push((*input, ops::map(g, |x| x * factor)));
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                out.push((*input, Tensor::full(self.shape(*input), gv)));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                for (v, t) in inputs.iter().zip(grads) {
                    if let Some(t) = t {
                        if t.shape() != self.shape(*v) {
                            return Err(Error::shape(
                                "custom backward",
                                format!("{} returned gradient {} for input {}", op.name(), t.shape(), self.shape(*v)),
                            ));
                        }
                        out.push((*v, t));
                    }
                }
            }
        }
        Ok(out)
    }
}
