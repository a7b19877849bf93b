//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose parents were pushed earlier, so node order is a topological
//! order and the backward sweep simply walks the list from the back, visiting
//! each node once.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, LossWeights};
use crate::shuffle::{self, ShuffleFactors};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Conv { input: NodeId, weight: NodeId, bias: NodeId, geom: ConvGeometry },
    Act { input: NodeId, kind: Activation },
    MaxPool { input: NodeId, argmax: Vec<usize> },
    Upsample { input: NodeId, factors: [usize; 3] },
    Concat(NodeId, NodeId),
    Pds(NodeId, ShuffleFactors),
    Pus(NodeId, ShuffleFactors),
    Softmax(NodeId),
    WeightedSum { input: NodeId, coeffs: Tensor4 },
    CeDice { probs: NodeId, labels: Tensor4, weights: LossWeights },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Conv { .. } => "conv3d",
            Op::Act { .. } => "activation",
            Op::MaxPool { .. } => "maxpool",
            Op::Upsample { .. } => "upsample",
            Op::Concat(..) => "concat",
            Op::Pds(..) => "pds",
            Op::Pus(..) => "pus",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::CeDice { .. } => "ce_dice",
        }
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
    grad: Option<Tensor4>,
}

/// Gradients of every named parameter reachable from a loss, in the order
/// the parameters were registered.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub entries: Vec<(String, Tensor4)>,
}

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param: None, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that does not receive gradients (inputs, targets).
    pub fn constant(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable leaf reported by name in [`Graph::backward`].
    pub fn param(&mut self, name: &str, value: Tensor4) -> NodeId {
        let id = self.variable(value);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Conv { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Act { input, .. }
            | Op::MaxPool { input, .. }
            | Op::Upsample { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::Pds(a, _) | Op::Pus(a, _) | Op::Softmax(a) => vec![*a],
            Op::CeDice { probs, .. } => vec![*probs],
        }
    }

    /// Accumulated gradient; zeros before any backward pass.
    pub fn grad(&self, id: NodeId) -> Tensor4 {
        let n = &self.nodes[id.0];
        match &n.grad {
            Some(g) => g.clone(),
            None => Tensor4::zeros(n.value.shape()).expect("node shapes are valid"),
        }
    }

    /// Clears all gradient accumulators so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = kernels::conv3d_forward(self.value(input), self.value(weight), self.value(bias), &geom)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(v, Op::Conv { input, weight, bias, geom }, rg))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let v = self.value(input).map(|x| kind.apply(x));
        let rg = self.rg(&[input]);
        self.push(v, Op::Act { input, kind }, rg)
    }

    pub fn maxpool(&mut self, input: NodeId, factors: [usize; 3]) -> Result<NodeId> {
        let (v, argmax) = kernels::maxpool_forward(self.value(input), factors)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample(&mut self, input: NodeId, factors: [usize; 3]) -> Result<NodeId> {
        let v = kernels::upsample_forward(self.value(input), factors)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Upsample { input, factors }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor4::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Concat(a, b), rg))
    }

    pub fn pds(&mut self, input: NodeId, f: ShuffleFactors) -> Result<NodeId> {
        let v = shuffle::pds(self.value(input), f)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Pds(input, f), rg))
    }

    pub fn pus(&mut self, input: NodeId, f: ShuffleFactors) -> Result<NodeId> {
        let v = shuffle::pus(self.value(input), f)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Pus(input, f), rg))
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> NodeId {
        let v = kernels::softmax_forward(self.value(input));
        let rg = self.rg(&[input]);
        self.push(v, Op::Softmax(input), rg)
    }

    /// Scalar `sum(input * coeffs)`; handy for probing gradients of
    /// non-scalar outputs.
    pub fn weighted_sum(&mut self, input: NodeId, coeffs: Tensor4) -> Result<NodeId> {
        let v = self.value(input).dot(&coeffs)?;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor4::scalar(v), Op::WeightedSum { input, coeffs }, rg))
    }

    /// Combined cross-entropy + soft-Dice loss against one-hot `labels`.
    pub fn ce_dice_loss(&mut self, probs: NodeId, labels: Tensor4, weights: LossWeights) -> Result<NodeId> {
        kernels::check_one_hot(&labels)?;
        let parts = kernels::ce_dice_forward(self.value(probs), &labels, weights)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor4::scalar(parts.total), Op::CeDice { probs, labels, weights }, rg))
    }

    fn accumulate(grads: &mut [Option<Tensor4>], id: NodeId, g: Tensor4) -> Result<()> {
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Back-propagates from the scalar `root`, leaving gradients in every
    /// node and returning those of the named parameters. A second call
    /// without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<ParamGrads> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran; call zero_grad first".into()));
        }
        let root_shape = self.value(root).shape();
        if root_shape.len() != 1 {
            return Err(Error::Graph(format!("backward root must be scalar, got shape {root_shape}")));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor4>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads)?;
            }
            self.nodes[i].grad = Some(g);
        }

        Ok(ParamGrads {
            entries: self
                .nodes
                .iter()
                .filter_map(|n| {
                    let name = n.param.clone()?;
                    let g = match &n.grad {
                        Some(g) => g.clone(),
                        None => Tensor4::zeros(n.value.shape()).ok()?,
                    };
                    Some((name, g))
                })
                .collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        Self::accumulate(grads, id, g.clone())?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    Self::accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if wants(*b) {
                    Self::accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Conv { input, weight, bias, geom } => {
                let cg = kernels::conv3d_backward(self.value(*input), self.value(*weight), geom, g, wants(*input))?;
                if let Some(dx) = cg.input {
                    Self::accumulate(grads, *input, dx)?;
                }
                if wants(*weight) {
                    Self::accumulate(grads, *weight, cg.weight)?;
                }
                if wants(*bias) {
                    Self::accumulate(grads, *bias, cg.bias)?;
                }
            }
            Op::Act { input, kind } => {
                let x = self.value(*input);
                let mut dx = g.clone();
                for ((d, &xv), &yv) in dx.data_mut().iter_mut().zip(x.data()).zip(node.value.data()) {
                    *d *= kind.derivative(xv, yv);
                }
                Self::accumulate(grads, *input, dx)?;
            }
            Op::MaxPool { input, argmax } => {
                let dx = kernels::maxpool_backward(self.value(*input).shape(), argmax, g)?;
                Self::accumulate(grads, *input, dx)?;
            }
            Op::Upsample { input, factors } => {
                let dx = kernels::upsample_backward(self.value(*input).shape(), *factors, g)?;
                Self::accumulate(grads, *input, dx)?;
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape().c;
                let (ga, gb) = g.split_channels(ca)?;
                if wants(*a) {
                    Self::accumulate(grads, *a, ga)?;
                }
                if wants(*b) {
                    Self::accumulate(grads, *b, gb)?;
                }
            }
            Op::Pds(a, f) => Self::accumulate(grads, *a, shuffle::pds_adjoint(g, *f)?)?,
            Op::Pus(a, f) => Self::accumulate(grads, *a, shuffle::pus_adjoint(g, *f)?)?,
            Op::Softmax(a) => Self::accumulate(grads, *a, kernels::softmax_backward(&node.value, g))?,
            Op::WeightedSum { input, coeffs } => {
                Self::accumulate(grads, *input, coeffs.scale(g.data()[0]))?;
            }
            Op::CeDice { probs, labels, weights } => {
                let dx = kernels::ce_dice_backward(self.value(*probs), labels, *weights, g.data()[0])?;
                Self::accumulate(grads, *probs, dx)?;
            }
        }
        Ok(())
    }
}
