//! Reverse-mode automatic differentiation over a static expression graph.
//!
//! A [`Graph`] is built once, then evaluated any number of times with
//! [`Graph::forward`] against fresh [`Bindings`]. Each forward caches every
//! intermediate value; [`Graph::backward`] then sweeps the nodes in reverse
//! and returns the gradient of the output (contracted with a seed tensor)
//! for every differentiable input.
//!
//! Tensors in the graph are matrices `[rows, cols]`; a batch of samples is
//! laid out one sample per row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth activations; all are C¹ so Jacobians exist everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Sigmoid,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x` with output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    /// Global bound on |derivative|.
    pub fn max_slope(self) -> f64 {
        match self {
            Activation::Tanh | Activation::Identity => 1.0,
            Activation::Sigmoid => 0.25,
            // sup of s(x)(1 + x(1 - s(x))), attained near x ≈ 2.3994
            Activation::Silu => 1.099_839_4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, differentiable: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    SumAll(NodeId),
    RowSum(NodeId),
    ConcatCols(NodeId, NodeId),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::SumAll(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Name → value map supplied to [`Graph::forward`].
pub type Bindings<'a> = BTreeMap<&'a str, &'a Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    input_shapes: BTreeMap<usize, Vec<usize>>,
    output: Option<NodeId>,
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

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Input { differentiable, .. } => *differentiable,
            Op::Constant(_) => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Scale(a, _) | Op::Act(a, _) | Op::SumAll(a) | Op::RowSum(a) => {
                self.nodes[a.0].requires_grad
            }
        };
        self.nodes.push(Node { op, requires_grad });
        self.values.clear();
        let id = NodeId(self.nodes.len() - 1);
        self.output = Some(id);
        id
    }

    /// A named input. Differentiable inputs receive gradients in
    /// [`Graph::backward`].
    pub fn input(&mut self, name: impl Into<String>, differentiable: bool) -> NodeId {
        self.push(Op::Input {
            name: name.into(),
            differentiable,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value.as_matrix()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            self.output = Some(a);
            return a;
        }
        self.push(Op::Act(a, act))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    /// ½‖a‖² summed over every entry.
    pub fn half_sq_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        let s = self.sum(sq);
        self.scale(s, 0.5)
    }

    /// Marks the node whose value `forward` returns. Defaults to the most
    /// recently added node.
    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Names of inputs, in insertion order, with their differentiability.
    pub fn inputs(&self) -> Vec<(&str, bool)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input {
                    name,
                    differentiable,
                } => Some((name.as_str(), *differentiable)),
                _ => None,
            })
            .collect()
    }

    /// Cached value of `node` from the last forward pass.
    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.values
            .get(node.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("node {} has no cached value; run forward first", node.0)))
    }

    pub fn forward(&mut self, bindings: &Bindings<'_>) -> Result<Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::State("graph has no nodes".into()))?;
        self.values.clear();
        self.input_shapes.clear();
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name, .. } = &node.op {
                if let Some(t) = bindings.get(name.as_str()) {
                    self.input_shapes.insert(idx, t.shape().to_vec());
                }
            }
            let v = eval_node(idx, &node.op, &values, bindings)?;
            values.push(Some(v));
        }
        self.values = values;
        Ok(self.values[out.0].clone().expect("output computed"))
    }

    /// Gradients of `⟨seed, output⟩` with respect to every differentiable
    /// input. `seed` must have the output's shape.
    pub fn backward(&self, seed: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let out = self
            .output
            .ok_or_else(|| Error::State("graph has no nodes".into()))?;
        if self.values.len() != self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        let out_val = self.value(out)?;
        if seed.len() != out_val.len() {
            return Err(Error::Shape(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::new(out_val.shape().to_vec(), seed.data().to_vec())?);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut result = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                differentiable: true,
            } = &node.op
            {
                let shape = self.input_shapes[&idx].clone();
                let g = match grads[idx].take() {
                    Some(g) => g.reshape(&shape)?,
                    None => Tensor::zeros(&shape),
                };
                result.insert(name.clone(), g);
            }
        }
        Ok(result)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("forward ran")
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        op: &Op,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match *op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.matmul_t(self.val(b))?)?;
                }
                if self.needs(b) {
                    accumulate(grads, b, self.val(a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.matmul(self.val(b))?)?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.t_matmul(self.val(a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.zip_map(self.val(b), |x, y| x * y)?)?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.zip_map(self.val(a), |x, y| x * y)?)?;
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.needs(bias) {
                    let sums = g.column_sums();
                    let shape = self.val(bias).shape().to_vec();
                    accumulate(grads, bias, Tensor::new(shape, sums)?)?;
                }
            }
            Op::Scale(a, c) => accumulate(grads, a, g.scale(c))?,
            Op::Act(a, act) => {
                let x = self.val(a);
                let y = self.val(NodeId(idx));
                let mut d = g.clone();
                for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *dv *= act.derivative(xv, yv);
                }
                accumulate(grads, a, d)?;
            }
            Op::SumAll(a) => {
                let shape = self.val(a).shape().to_vec();
                accumulate(grads, a, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::RowSum(a) => {
                let (r, c) = self.val(a).dims2();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(std::iter::repeat_n(g.data()[i], c));
                }
                accumulate(grads, a, Tensor::matrix(r, c, d)?)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val(a).cols();
                let cb = self.val(b).cols();
                if self.needs(a) {
                    accumulate(grads, a, g.slice_cols(0, ca)?)?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.slice_cols(ca, ca + cb)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(g),
        Some(existing) => {
            if existing.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient accumulation {:?} vs {:?}",
                    existing.shape(),
                    g.shape()
                )));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
    }
    Ok(())
}

fn eval_node(
    idx: usize,
    op: &Op,
    values: &[Option<Tensor>],
    bindings: &Bindings<'_>,
) -> Result<Tensor> {
    let v = |id: NodeId| values[id.0].as_ref().expect("topological order");
    let ctx = |e: Error| match e {
        Error::Shape(msg) => Error::Shape(format!("node {idx} ({}): {msg}", op.label())),
        other => other,
    };
    let out = match op {
        Op::Input { name, .. } => bindings
            .get(name.as_str())
            .map(|t| t.as_matrix())
            .ok_or_else(|| Error::State(format!("node {idx}: input `{name}` is not bound")))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => v(*a).matmul(v(*b)).map_err(ctx)?,
        Op::MatMulT(a, b) => v(*a).matmul_t(v(*b)).map_err(ctx)?,
        Op::Add(a, b) => v(*a).add(v(*b)).map_err(ctx)?,
        Op::Sub(a, b) => v(*a).sub(v(*b)).map_err(ctx)?,
        Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y).map_err(ctx)?,
        Op::AddRow(a, b) => v(*a).add_row(v(*b)).map_err(ctx)?,
        Op::Scale(a, c) => v(*a).scale(*c),
        Op::Act(a, act) => v(*a).map(|x| act.apply(x)),
        Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
        Op::RowSum(a) => {
            let t = v(*a);
            let sums = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
            Tensor::matrix(t.rows(), 1, sums)?
        }
        Op::ConcatCols(a, b) => v(*a).concat_cols(v(*b)).map_err(ctx)?,
    };
    Ok(out)
}
