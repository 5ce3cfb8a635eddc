//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each node may only reference
//! nodes created before it, so insertion order is a topological order.
//! Evaluation binds named inputs, computes every node in order and returns an
//! [`Evaluation`] holding the values (and whatever each operator needs for
//! its backward pass). [`Graph::backward`] then walks the ancestors of a
//! scalar loss in reverse order and adds `dLoss/dParam` into the gradient
//! buffer of every parameter tensor. Gradients accumulate, so several loss
//! terms can be backpropagated one after another and summed.

mod finite_diff;
mod ops;

use rand::RngCore;

pub use finite_diff::{finite_diff_gradient, relative_error};

use crate::error::{Error, Result};
use crate::layers::BatchNormStats;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator of a graph node. Input arity is fixed per variant and checked
/// when the node is added.
#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(ParamId),
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    /// Sum of all elements divided by the leading (batch) dimension.
    BatchMeanSum,
    MatMul,
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// `ln(max(x, 1e-12))`.
    SafeLog,
    /// Keeps the leading dimension and flattens the rest.
    Flatten,
    Reshape(Vec<usize>),
    /// Inputs: `x (N×D'×H×W)`, `w (D×D'×kh×kw)`, `b (D)`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// 2×2 window, stride 2.
    MaxPool2d,
    /// Inputs: `x (N×in)`, `w (out×in)`, `b (out)`.
    Dense,
    Dropout {
        p: f64,
    },
    /// Inputs: `x`, `gamma`, `beta`; `state` indexes the graph's batch-norm states.
    BatchNorm {
        state: usize,
    },
    /// Inputs: `logits (N×C)`, `labels (N)`; mean categorical cross-entropy.
    CrossEntropy,
    /// Softmax entropy over the channel axis of `N×D×A×B` (or `N×D`),
    /// producing `N×A×B` (or `N×1×1`).
    RfavEntropy,
    /// Pearson correlation between the flattened filters of a `D×…` weight
    /// tensor, centred on the componentwise mean filter.
    FilterCorrelation,
    /// Sum of the strictly lower triangle of a square matrix.
    LowerTriangleSum {
        absolute: bool,
    },
}

impl Op {
    fn arity(&self) -> usize {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => 0,
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::CrossEntropy => 2,
            Op::Conv2d { .. } | Op::Dense | Op::BatchNorm { .. } => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::BatchMeanSum => "batch_mean_sum",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::SafeLog => "log",
            Op::Flatten => "flatten",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d => "maxpool2d",
            Op::Dense => "dense",
            Op::Dropout { .. } => "dropout",
            Op::BatchNorm { .. } => "batchnorm",
            Op::CrossEntropy => "cross_entropy",
            Op::RfavEntropy => "rfav_entropy",
            Op::FilterCorrelation => "filter_correlation",
            Op::LowerTriangleSum { .. } => "lower_triangle_sum",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: Option<String>,
    requires_grad: bool,
}

impl Node {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub node: NodeId,
    pub value: Tensor,
}

/// Whether stochastic and batch-statistics layers run in training mode.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Training(_))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Parameter>,
    batch_norms: Vec<BatchNormStats>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node. Inputs must refer to existing nodes, which makes
    /// cycles unrepresentable.
    pub fn add(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        for &input in inputs {
            if input.0 >= id {
                return Err(Error::InvalidReference {
                    node: id,
                    input: input.0,
                });
            }
        }
        if inputs.len() != op.arity() {
            return Err(Error::invalid(format!(
                "{} expects {} inputs, got {}",
                op.kind(),
                op.arity(),
                inputs.len()
            )));
        }
        match &op {
            Op::Param(p) if p.0 >= self.params.len() => {
                return Err(Error::invalid(format!("unknown parameter {}", p.0)))
            }
            Op::BatchNorm { state } if *state >= self.batch_norms.len() => {
                return Err(Error::invalid(format!("unknown batch-norm state {state}")))
            }
            Op::Dropout { p } if !(0.0..1.0).contains(p) => {
                return Err(Error::invalid(format!(
                    "dropout probability {p} outside [0, 1)"
                )))
            }
            _ => {}
        }
        let requires_grad = match &op {
            Op::Param(p) => self.params[p.0].value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            name: None,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    /// Registers a trainable leaf tensor and returns its node.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let name = name.into();
        let pid = ParamId(self.params.len());
        let node = NodeId(self.nodes.len());
        self.params.push(Parameter {
            name: name.clone(),
            node,
            value: value.with_requires_grad(true),
        });
        self.nodes.push(Node {
            op: Op::Param(pid),
            inputs: Vec::new(),
            name: Some(name),
            requires_grad: true,
        });
        node
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        let id = self
            .add(Op::Input(name.clone()), &[])
            .expect("input nodes have no operands");
        self.nodes[id.0].name = Some(name);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.add(Op::Constant(value), &[])
            .expect("constant nodes have no operands")
    }

    pub fn add_batch_norm(&mut self, state: BatchNormStats) -> usize {
        self.batch_norms.push(state);
        self.batch_norms.len() - 1
    }

    pub fn set_name(&mut self, node: NodeId, name: impl Into<String>) {
        self.nodes[node.0].name = Some(name.into());
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
            .map(NodeId)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_of(&self, node: NodeId) -> Option<ParamId> {
        match self.nodes[node.0].op {
            Op::Param(p) => Some(p),
            _ => None,
        }
    }

    pub fn batch_norms(&self) -> &[BatchNormStats] {
        &self.batch_norms
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.batch_norms
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Confirms every node only references earlier nodes.
    pub fn validate(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            for input in &node.inputs {
                if input.0 >= id {
                    return Err(Error::InvalidReference {
                        node: id,
                        input: input.0,
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn describe(&self, id: usize) -> String {
        let node = &self.nodes[id];
        match &node.name {
            Some(name) => format!("node #{id} `{name}` ({})", node.op.kind()),
            None => format!("node #{id} ({})", node.op.kind()),
        }
    }

    /// Evaluates every node in order with the given named inputs.
    pub fn evaluate(&mut self, inputs: &[(&str, &Tensor)], mode: Mode<'_>) -> Result<Evaluation> {
        self.validate()?;
        let mut mode = mode;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches: Vec<ops::Cache> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let (value, cache) = match self.nodes[id].op {
                Op::Input(_) | Op::Param(_) | Op::Constant(_) => {
                    (self.leaf_value(id, inputs)?, ops::Cache::None)
                }
                _ => ops::forward(self, id, &values, &mut mode)?,
            };
            values.push(value);
            caches.push(cache);
        }
        Ok(Evaluation { values, caches })
    }

    fn leaf_value(&self, id: usize, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        match &self.nodes[id].op {
            Op::Input(name) => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if !t.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("input `{name}`"),
                    });
                }
                Ok(Tensor::new(t.shape().to_vec(), t.data().to_vec())?)
            }
            Op::Param(p) => {
                let v = &self.params[p.0].value;
                Ok(Tensor::new(v.shape().to_vec(), v.data().to_vec())?)
            }
            Op::Constant(t) => Ok(t.clone()),
            _ => unreachable!("leaf_value on an interior node"),
        }
    }

    /// Adds `d(loss)/d(param)` into each parameter's gradient buffer.
    pub fn backward(&mut self, eval: &Evaluation, loss: NodeId) -> Result<()> {
        self.validate()?;
        if eval.values.len() != self.nodes.len() || loss.0 >= self.nodes.len() {
            return Err(Error::NotEvaluated(loss.0));
        }
        let loss_value = &eval.values[loss.0];
        if loss_value.len() != 1 {
            return Err(Error::NotScalar {
                node: self.describe(loss.0),
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                self.params[p.0].value.accumulate_grad(&upstream);
                continue;
            }
            let input_grads = ops::backward(self, id, eval, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Fresh gradients of `loss` for every parameter, in parameter order.
    pub fn gradients(&mut self, eval: &Evaluation, loss: NodeId) -> Result<Vec<(String, Tensor)>> {
        self.zero_grad();
        self.backward(eval, loss)?;
        Ok(self.take_gradients())
    }

    /// Moves the accumulated gradient buffers out of the parameters. Parameters
    /// never reached by a loss get a zero tensor.
    pub fn take_gradients(&mut self) -> Vec<(String, Tensor)> {
        self.params
            .iter_mut()
            .map(|p| {
                let shape = p.value.shape().to_vec();
                let data = p
                    .value
                    .take_grad()
                    .unwrap_or_else(|| vec![0.0; p.value.len()]);
                let t = Tensor::new(shape, data).expect("gradient matches parameter shape");
                (p.name.clone(), t)
            })
            .collect()
    }
}

/// Values (and backward caches) of one forward pass.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    caches: Vec<ops::Cache>,
}

impl Evaluation {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn named<'a>(&'a self, graph: &Graph, name: &str) -> Option<&'a Tensor> {
        graph.node_by_name(name).map(|id| self.get(id))
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0].item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn add_node_evaluates_elementwise() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let s = g.add(Op::Add, &[a, b]).unwrap();
        let (ta, tb) = (vec_t(&[1.0, 2.0]), vec_t(&[3.0, 4.0]));
        let ev = g
            .evaluate(&[("a", &ta), ("b", &tb)], Mode::Inference)
            .unwrap();
        assert_eq!(ev.get(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_of_ones_gives_row_sums() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let m = g.add(Op::MatMul, &[a, b]).unwrap();
        let ta = Tensor::full([2, 3], 1.0);
        let tb = Tensor::full([3, 1], 1.0);
        let ev = g
            .evaluate(&[("a", &ta), ("b", &tb)], Mode::Inference)
            .unwrap();
        assert_eq!(ev.get(m).shape(), &[2, 1]);
        assert_eq!(ev.get(m).data(), &[3.0, 3.0]);
    }

    #[test]
    fn relu_of_softmax_is_uniform_for_equal_logits() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.add(Op::Softmax, &[x]).unwrap();
        let r = g.add(Op::Relu, &[s]).unwrap();
        let tx = vec_t(&[0.0, 0.0]);
        let ev = g.evaluate(&[("x", &tx)], Mode::Inference).unwrap();
        assert_eq!(ev.get(r).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let s = g.add(Op::Add, &[a, b]).unwrap();
        g.set_name(s, "bad_sum");
        let (ta, tb) = (vec_t(&[1.0, 2.0]), vec_t(&[3.0]));
        let err = g
            .evaluate(&[("a", &ta), ("b", &tb)], Mode::Inference)
            .unwrap_err();
        assert!(err.to_string().contains("bad_sum"), "{err}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let a = g.input("a");
        g.add(Op::Relu, &[a]).unwrap();
        let ta = vec_t(&[1.0, f64::NAN]);
        assert!(matches!(
            g.evaluate(&[("a", &ta)], Mode::Inference),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn missing_input_is_rejected() {
        let mut g = Graph::new();
        g.input("a");
        assert!(matches!(
            g.evaluate(&[], Mode::Inference),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn forward_references_are_rejected() {
        let mut g = Graph::new();
        let a = g.input("a");
        let err = g.add(Op::Add, &[a, NodeId(5)]).unwrap_err();
        assert!(matches!(err, Error::InvalidReference { .. }));
    }

    #[test]
    fn manually_corrupted_order_fails_validation() {
        let mut g = Graph::new();
        let a = g.input("a");
        let r = g.add(Op::Relu, &[a]).unwrap();
        g.nodes[r.0].inputs[0] = r;
        assert!(g.validate().is_err());
        let ta = vec_t(&[1.0]);
        assert!(g.evaluate(&[("a", &ta)], Mode::Inference).is_err());
    }

    #[test]
    fn gradient_of_weighted_sum_is_input() {
        let mut g = Graph::new();
        let w = g.param("w", vec_t(&[1.0, 2.0]));
        let x = g.input("x");
        let p = g.add(Op::Mul, &[w, x]).unwrap();
        let loss = g.add(Op::Sum, &[p]).unwrap();
        let tx = vec_t(&[3.0, 4.0]);
        let ev = g.evaluate(&[("x", &tx)], Mode::Inference).unwrap();
        let grads = g.gradients(&ev, loss).unwrap();
        assert_eq!(grads[0].1.data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_of_square_is_linear() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0));
        let one = g.constant(Tensor::scalar(1.0));
        let d = g.add(Op::Sub, &[w, one]).unwrap();
        let sq = g.add(Op::Mul, &[d, d]).unwrap();
        let ev = g.evaluate(&[], Mode::Inference).unwrap();
        let grads = g.gradients(&ev, sq).unwrap();
        assert_eq!(grads[0].1.item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", vec_t(&[1.0, 2.0]));
        let r = g.add(Op::Relu, &[w]).unwrap();
        let ev = g.evaluate(&[], Mode::Inference).unwrap();
        assert!(matches!(g.backward(&ev, r), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let w = g.param("w", vec_t(&[1.0, -2.0]));
        let s = g.add(Op::Sum, &[w]).unwrap();
        let sq = g.add(Op::Mul, &[w, w]).unwrap();
        let s2 = g.add(Op::Sum, &[sq]).unwrap();
        let total = g.add(Op::Add, &[s, s2]).unwrap();
        let ev = g.evaluate(&[], Mode::Inference).unwrap();
        let combined = g.gradients(&ev, total).unwrap();
        g.zero_grad();
        g.backward(&ev, s).unwrap();
        g.backward(&ev, s2).unwrap();
        let separate = g.take_gradients();
        assert_eq!(combined[0].1.data(), separate[0].1.data());
        assert_eq!(combined[0].1.data(), &[3.0, -3.0]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param(
            "w",
            Tensor::new([3, 2], vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.9]).unwrap(),
        );
        let m = g.add(Op::MatMul, &[x, w]).unwrap();
        let s = g.add(Op::Softmax, &[m]).unwrap();
        let tx = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let a = g.evaluate(&[("x", &tx)], Mode::Inference).unwrap();
        let b = g.evaluate(&[("x", &tx)], Mode::Inference).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.get(s)), bits(b.get(s)));
    }
}
