//! Static compute graph with reverse-mode gradients.
//!
//! A graph is built once from inputs, parameters, and op nodes; shapes are
//! resolved at evaluation time, so one graph serves any sequence length.
//! Parameters live in a [`ParamStoreBase`] shared by every graph of a model,
//! which keeps training, encoding, and frozen-sampling graphs in sync.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

pub type NodeId = usize;

/// Named tensors fed to `evaluate`/`gradients`.
pub type Feeds<S> = BTreeMap<String, TensorBase<S>>;

/// Gradient target: a named parameter or a named input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wrt {
    Param(String),
    Input(String),
}

impl Wrt {
    pub fn name(&self) -> &str {
        match self {
            Wrt::Param(n) | Wrt::Input(n) => n,
        }
    }
}

/// Named trainable tensors, iterated in sorted-name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStoreBase<S> {
    values: BTreeMap<String, TensorBase<S>>,
}

impl<S: Scalar> ParamStoreBase<S> {
    pub fn new() -> Self {
        Self { values: BTreeMap::new() }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    /// Insert `init()` under `name` unless already present.
    pub fn init(&mut self, name: &str, init: impl FnOnce() -> TensorBase<S>) {
        if !self.values.contains_key(name) {
            self.values.insert(name.to_string(), init());
        }
    }

    pub fn set(&mut self, name: &str, value: TensorBase<S>) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&TensorBase<S>> {
        self.values
            .get(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorBase<S>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorBase<S>)> {
        self.values.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.values.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.values().map(|t| t.numel()).sum()
    }

    /// Copy every parameter from `other`, converting scalar type.
    pub fn absorb<T: Scalar>(&mut self, other: &ParamStoreBase<T>) {
        for (k, v) in other.iter() {
            self.values.insert(k.clone(), v.cast());
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Input(String),
    Param(String),
    Const(TensorBase<S>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    Conv1d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    PowScalar(NodeId, S),
    Clamp(NodeId, S, S),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: S },
    Gather { table: NodeId, indices: NodeId },
    NearestIndex { x: NodeId, codebook: NodeId },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Reshape { x: NodeId, shape: Vec<i64> },
    StopGradient(NodeId),
    GreaterThan(NodeId, S),
}

impl<S: Scalar> Op<S> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose2(..) => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::PowScalar(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::NearestIndex { .. } => "nearest_index",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::StopGradient(_) => "stop_gradient",
            Op::GreaterThan(..) => "greater_than",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Transpose2(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::PowScalar(x, _)
            | Op::Clamp(x, _, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::StopGradient(x)
            | Op::GreaterThan(x, _) => vec![*x],
            Op::Conv1d { x, weight, bias, .. } | Op::ConvTranspose1d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, indices } => vec![*table, *indices],
            Op::NearestIndex { x, codebook } => vec![*x, *codebook],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<S: Scalar> {
    op: Op<S>,
    label: Option<String>,
}

/// Result of a gradient sweep.
#[derive(Debug)]
pub struct GradResult<S: Scalar> {
    pub loss: S,
    /// Gradients keyed by the wrt name.
    pub grads: BTreeMap<String, TensorBase<S>>,
    /// Values of the extra output nodes requested alongside the sweep.
    pub outputs: Vec<TensorBase<S>>,
}

pub struct GraphBase<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_nodes: BTreeMap<String, NodeId>,
    input_nodes: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl<S: Scalar> Default for GraphBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<TensorBase<S>>], contribs: Vec<(NodeId, TensorBase<S>)>) {
    for (nid, g) in contribs {
        match &mut grads[nid] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

impl<S: Scalar> GraphBase<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            input_nodes: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op<S>) -> NodeId {
        self.nodes.push(Node { op, label: None });
        self.nodes.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id].label {
            Some(l) => format!("{l} (node {id})"),
            None => format!("{}#{id}", self.nodes[id].op.kind()),
        }
    }

    pub fn set_label(&mut self, id: NodeId, label: &str) {
        self.nodes[id].label = Some(label.to_string());
    }

    /// Declare a named placeholder fed at evaluation time. Idempotent.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.input_nodes.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.input_nodes.insert(name.to_string(), id);
        id
    }

    /// Declare a named parameter node. Idempotent per name.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(Op::Const(value))
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

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: S) -> NodeId {
        self.push(Op::AddScalar(x, offset))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose2(x))
    }

    pub fn conv1d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv1d { x, weight, bias, stride, padding })
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize, padding: usize) -> NodeId {
        self.push(Op::ConvTranspose1d { x, weight, bias, stride, padding })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }

    pub fn pow_scalar(&mut self, x: NodeId, exponent: S) -> NodeId {
        self.push(Op::PowScalar(x, exponent))
    }

    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> NodeId {
        self.push(Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax { x, axis })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn gather(&mut self, table: NodeId, indices: NodeId) -> NodeId {
        self.push(Op::Gather { table, indices })
    }

    pub fn nearest_index(&mut self, x: NodeId, codebook: NodeId) -> NodeId {
        self.push(Op::NearestIndex { x, codebook })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll(x))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::MeanAxis { x, axis })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat { parts, axis })
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { x, axis, start, end })
    }

    /// Reshape; one entry may be -1 to infer that dimension.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<i64>) -> NodeId {
        self.push(Op::Reshape { x, shape })
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGradient(x))
    }

    pub fn greater_than(&mut self, x: NodeId, threshold: S) -> NodeId {
        self.push(Op::GreaterThan(x, threshold))
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.param_nodes.keys()
    }

    /// Mark every ancestor of `targets` (inclusive).
    fn needed(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if need[id] {
                continue;
            }
            need[id] = true;
            stack.extend(self.nodes[id].op.inputs());
        }
        need
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Option<TensorBase<S>>],
        aux: &mut [Option<(Vec<S>, Vec<S>)>],
        params: &ParamStoreBase<S>,
        feeds: &Feeds<S>,
    ) -> Result<TensorBase<S>> {
        let val = |nid: NodeId| values[nid].as_ref().expect("topological order");
        let kind = self.nodes[id].op.kind();
        match &self.nodes[id].op {
            Op::Input(n) => feeds
                .get(n)
                .cloned()
                .ok_or_else(|| CoreError::MissingInput(n.clone())),
            Op::Param(n) => Ok(params.get(n)?.clone()),
            Op::Const(t) => Ok(t.clone()),
            Op::Add(a, b) => ops::binary(kind, val(*a), val(*b), |x, y| x + y),
            Op::Sub(a, b) => ops::binary(kind, val(*a), val(*b), |x, y| x - y),
            Op::Mul(a, b) => ops::binary(kind, val(*a), val(*b), |x, y| x * y),
            Op::Div(a, b) => ops::binary(kind, val(*a), val(*b), |x, y| x / y),
            Op::Scale(x, f) => {
                let f = *f;
                Ok(val(*x).map(|v| v * f))
            }
            Op::AddScalar(x, c) => {
                let c = *c;
                Ok(val(*x).map(|v| v + c))
            }
            Op::MatMul(a, b) => ops::matmul(kind, val(*a), val(*b)),
            Op::Transpose2(x) => ops::transpose2(kind, val(*x)),
            Op::Conv1d { x, weight, bias, stride, padding } => {
                let b = bias.map(|bid| values[bid].as_ref().expect("topological order"));
                ops::conv1d(kind, val(*x), val(*weight), b, *stride, *padding)
            }
            Op::ConvTranspose1d { x, weight, bias, stride, padding } => {
                let b = bias.map(|bid| values[bid].as_ref().expect("topological order"));
                ops::conv_transpose1d(kind, val(*x), val(*weight), b, *stride, *padding)
            }
            Op::Relu(x) => Ok(val(*x).map(|v| if v > S::zero() { v } else { S::zero() })),
            Op::Gelu(x) => Ok(val(*x).map(ops::gelu_value)),
            Op::Sigmoid(x) => Ok(val(*x).map(ops::sigmoid_value)),
            Op::Square(x) => Ok(val(*x).map(|v| v * v)),
            Op::Sqrt(x) => Ok(val(*x).map(|v| v.sqrt())),
            Op::Log(x) => Ok(val(*x).map(|v| v.ln())),
            Op::Exp(x) => Ok(val(*x).map(|v| v.exp())),
            Op::Abs(x) => Ok(val(*x).map(|v| v.abs())),
            Op::PowScalar(x, e) => {
                let e = *e;
                Ok(val(*x).map(|v| v.powf(e)))
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                Ok(val(*x).map(|v| v.max(lo).min(hi)))
            }
            Op::Softmax { x, axis } => ops::softmax(kind, val(*x), *axis),
            Op::LayerNorm { x, gain, bias, eps } => {
                let (y, means, inv) = ops::layer_norm(kind, val(*x), val(*gain), val(*bias), *eps)?;
                aux[id] = Some((means, inv));
                Ok(y)
            }
            Op::Gather { table, indices } => ops::gather(kind, val(*table), val(*indices)),
            Op::NearestIndex { x, codebook } => ops::nearest_index(kind, val(*x), val(*codebook)),
            Op::SumAll(x) => {
                let mut acc = S::zero();
                for &v in val(*x).data() {
                    acc += v;
                }
                Ok(TensorBase::scalar(acc))
            }
            Op::MeanAll(x) => {
                let t = val(*x);
                if t.numel() == 0 {
                    return Err(CoreError::ShapeMismatch {
                        node: kind.into(),
                        detail: "mean of empty tensor".into(),
                    });
                }
                let mut acc = S::zero();
                for &v in t.data() {
                    acc += v;
                }
                Ok(TensorBase::scalar(acc / S::of(t.numel() as f64)))
            }
            Op::SumAxis { x, axis } => ops::sum_axis(kind, val(*x), *axis),
            Op::MeanAxis { x, axis } => {
                let t = val(*x);
                let lane = S::of(t.shape()[*axis] as f64);
                Ok(ops::sum_axis(kind, t, *axis)?.map(|v| v / lane))
            }
            Op::Concat { parts, axis } => {
                let tensors: Vec<&TensorBase<S>> = parts.iter().map(|&p| val(p)).collect();
                ops::concat(kind, &tensors, *axis)
            }
            Op::Slice { x, axis, start, end } => ops::slice(kind, val(*x), *axis, *start, *end),
            Op::Reshape { x, shape } => {
                let t = val(*x);
                let resolved = resolve_shape(kind, shape, t.numel())?;
                t.reshaped(resolved)
            }
            Op::StopGradient(x) => Ok(val(*x).clone()),
            Op::GreaterThan(x, thr) => {
                let thr = *thr;
                Ok(val(*x).map(|v| if v > thr { S::one() } else { S::zero() }))
            }
        }
    }

    fn forward(
        &self,
        params: &ParamStoreBase<S>,
        feeds: &Feeds<S>,
        need: &[bool],
    ) -> Result<(Vec<Option<TensorBase<S>>>, Vec<Option<(Vec<S>, Vec<S>)>>)> {
        let mut values: Vec<Option<TensorBase<S>>> = vec![None; self.nodes.len()];
        let mut aux: Vec<Option<(Vec<S>, Vec<S>)>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if !need[id] {
                continue;
            }
            let out = self
                .eval_node(id, &values, &mut aux, params, feeds)
                .map_err(|e| self.name_error(e, id))?;
            values[id] = Some(out);
        }
        Ok((values, aux))
    }

    /// Attach the offending node's name to shape errors.
    fn name_error(&self, e: CoreError, id: NodeId) -> CoreError {
        match e {
            CoreError::ShapeMismatch { detail, .. } => CoreError::ShapeMismatch {
                node: self.node_name(id),
                detail,
            },
            other => other,
        }
    }

    /// Evaluate the requested nodes. Deterministic: identical
    /// (graph, parameters, inputs) produce bitwise-identical outputs.
    pub fn evaluate(
        &self,
        params: &ParamStoreBase<S>,
        feeds: &Feeds<S>,
        outputs: &[NodeId],
    ) -> Result<Vec<TensorBase<S>>> {
        let need = self.needed(outputs);
        let (values, _) = self.forward(params, feeds, &need)?;
        Ok(outputs
            .iter()
            .map(|&id| values[id].clone().expect("output computed"))
            .collect())
    }

    /// Evaluate every node registered through `set_output`.
    pub fn evaluate_named(
        &self,
        params: &ParamStoreBase<S>,
        feeds: &Feeds<S>,
    ) -> Result<BTreeMap<String, TensorBase<S>>> {
        let ids: Vec<NodeId> = self.outputs.values().copied().collect();
        let vals = self.evaluate(params, feeds, &ids)?;
        Ok(self.outputs.keys().cloned().zip(vals).collect())
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// Targets not reachable from the loss get a zero gradient and a warning.
    /// `extra_outputs` are returned from the same forward pass.
    pub fn gradients(
        &self,
        params: &ParamStoreBase<S>,
        feeds: &Feeds<S>,
        loss: NodeId,
        wrt: &[Wrt],
        extra_outputs: &[NodeId],
    ) -> Result<GradResult<S>> {
        let mut targets = vec![loss];
        targets.extend_from_slice(extra_outputs);
        let need = self.needed(&targets);
        let (values, aux) = self.forward(params, feeds, &need)?;
        let loss_val = values[loss].as_ref().expect("loss computed");
        if loss_val.numel() != 1 {
            return Err(CoreError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let loss_scalar = loss_val.data()[0];

        // Only ancestors of the loss participate in the sweep.
        let in_sweep = self.needed(&[loss]);
        let mut grads: Vec<Option<TensorBase<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(TensorBase::full(loss_val.shape(), S::one()));

        for id in (0..self.nodes.len()).rev() {
            if !in_sweep[id] {
                continue;
            }
            let keep_leaf = matches!(self.nodes[id].op, Op::Input(_) | Op::Param(_) | Op::Const(_));
            if keep_leaf {
                continue; // leaves keep their accumulated gradient in place
            }
            let Some(dout) = grads[id].take() else { continue };
            let val = |nid: NodeId| values[nid].as_ref().expect("forward value");
            match &self.nodes[id].op {
                Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!(),
                Op::Add(a, b) => {
                    let ga = ops::reduce_to_shape(&dout, val(*a).shape());
                    let gb = ops::reduce_to_shape(&dout, val(*b).shape());
                    accumulate(&mut grads, vec![(*a, ga), (*b, gb)]);
                }
                Op::Sub(a, b) => {
                    let ga = ops::reduce_to_shape(&dout, val(*a).shape());
                    let gb = ops::reduce_to_shape(&dout.map(|v| -v), val(*b).shape());
                    accumulate(&mut grads, vec![(*a, ga), (*b, gb)]);
                }
                Op::Mul(a, b) => {
                    let da = ops::binary("mul_bwd", &dout, val(*b), |g, y| g * y)?;
                    let db = ops::binary("mul_bwd", &dout, val(*a), |g, x| g * x)?;
                    accumulate(
                        &mut grads,
                        vec![
                            (*a, ops::reduce_to_shape(&da, val(*a).shape())),
                            (*b, ops::reduce_to_shape(&db, val(*b).shape())),
                        ],
                    );
                }
                Op::Div(a, b) => {
                    let da = ops::binary("div_bwd", &dout, val(*b), |g, y| g / y)?;
                    let ratio = ops::binary("div_bwd", val(*a), val(*b), |x, y| -x / (y * y))?;
                    let db = ops::binary("div_bwd", &dout, &ratio, |g, r| g * r)?;
                    accumulate(
                        &mut grads,
                        vec![
                            (*a, ops::reduce_to_shape(&da, val(*a).shape())),
                            (*b, ops::reduce_to_shape(&db, val(*b).shape())),
                        ],
                    );
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, vec![(*x, dout.map(|v| v * f))]);
                }
                Op::AddScalar(x, _) => accumulate(&mut grads, vec![(*x, dout)]),
                Op::MatMul(a, b) => {
                    let bt = ops::transpose2("matmul_bwd", val(*b))?;
                    let at = ops::transpose2("matmul_bwd", val(*a))?;
                    let da = ops::matmul("matmul_bwd", &dout, &bt)?;
                    let db = ops::matmul("matmul_bwd", &at, &dout)?;
                    accumulate(&mut grads, vec![(*a, da), (*b, db)]);
                }
                Op::Transpose2(x) => {
                    let dx = ops::transpose2("transpose_bwd", &dout)?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Conv1d { x, weight, bias, stride, padding } => {
                    let (dx, dw, db) =
                        ops::conv1d_backward(val(*x), val(*weight), bias.is_some(), *stride, *padding, &dout);
                    let mut contribs = vec![(*x, dx), (*weight, dw)];
                    if let (Some(bid), Some(db)) = (bias, db) {
                        contribs.push((*bid, db));
                    }
                    accumulate(&mut grads, contribs);
                }
                Op::ConvTranspose1d { x, weight, bias, stride, padding } => {
                    let (dx, dw, db) = ops::conv_transpose1d_backward(
                        val(*x),
                        val(*weight),
                        bias.is_some(),
                        *stride,
                        *padding,
                        &dout,
                    );
                    let mut contribs = vec![(*x, dx), (*weight, dw)];
                    if let (Some(bid), Some(db)) = (bias, db) {
                        contribs.push((*bid, db));
                    }
                    accumulate(&mut grads, contribs);
                }
                Op::Relu(x) => {
                    let dx = ops::binary("relu_bwd", &dout, val(*x), |g, v| {
                        if v > S::zero() {
                            g
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Gelu(x) => {
                    let dx = ops::binary("gelu_bwd", &dout, val(*x), |g, v| g * ops::gelu_derivative(v))?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Sigmoid(x) => {
                    let dx = ops::binary("sigmoid_bwd", &dout, val(id), |g, y| g * y * (S::one() - y))?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Square(x) => {
                    let dx = ops::binary("square_bwd", &dout, val(*x), |g, v| g * S::of(2.0) * v)?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Sqrt(x) => {
                    let dx = ops::binary("sqrt_bwd", &dout, val(id), |g, y| g * S::of(0.5) / y)?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Log(x) => {
                    let dx = ops::binary("log_bwd", &dout, val(*x), |g, v| g / v)?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Exp(x) => {
                    let dx = ops::binary("exp_bwd", &dout, val(id), |g, y| g * y)?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Abs(x) => {
                    let dx = ops::binary("abs_bwd", &dout, val(*x), |g, v| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::PowScalar(x, e) => {
                    let e = *e;
                    let dx = ops::binary("pow_bwd", &dout, val(*x), |g, v| g * e * v.powf(e - S::one()))?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let dx = ops::binary("clamp_bwd", &dout, val(*x), |g, v| {
                        if v < lo || v > hi {
                            S::zero()
                        } else {
                            g
                        }
                    })?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Softmax { x, axis } => {
                    let dx = ops::softmax_backward(val(id), &dout, *axis);
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::LayerNorm { x, gain, bias, .. } => {
                    let (means, inv) = aux[id].as_ref().expect("layer norm stats");
                    let (dx, dg, db) = ops::layer_norm_backward(val(*x), val(*gain), means, inv, &dout);
                    accumulate(&mut grads, vec![(*x, dx), (*gain, dg), (*bias, db)]);
                }
                Op::Gather { table, indices } => {
                    let dt = ops::gather_backward(val(*table).shape(), val(*indices), &dout);
                    accumulate(&mut grads, vec![(*table, dt)]);
                }
                Op::NearestIndex { .. } | Op::GreaterThan(..) | Op::StopGradient(_) => {
                    // no gradient flows through discrete or blocked nodes
                }
                Op::SumAll(x) => {
                    let g = dout.data()[0];
                    accumulate(&mut grads, vec![(*x, TensorBase::full(val(*x).shape(), g))]);
                }
                Op::MeanAll(x) => {
                    let n = S::of(val(*x).numel().max(1) as f64);
                    let g = dout.data()[0] / n;
                    accumulate(&mut grads, vec![(*x, TensorBase::full(val(*x).shape(), g))]);
                }
                Op::SumAxis { x, axis } => {
                    let dx = ops::sum_axis_backward(val(*x).shape(), *axis, &dout, S::one());
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::MeanAxis { x, axis } => {
                    let lane = S::of(val(*x).shape()[*axis] as f64);
                    let dx = ops::sum_axis_backward(val(*x).shape(), *axis, &dout, S::one() / lane);
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    let mut contribs = Vec::with_capacity(parts.len());
                    for &p in parts {
                        let w = val(p).shape()[*axis];
                        let g = ops::slice("concat_bwd", &dout, *axis, offset, offset + w)?;
                        contribs.push((p, g));
                        offset += w;
                    }
                    accumulate(&mut grads, contribs);
                }
                Op::Slice { x, axis, start, .. } => {
                    let dx = ops::slice_backward(val(*x).shape(), *axis, *start, &dout);
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
                Op::Reshape { x, .. } => {
                    let dx = dout.reshaped(val(*x).shape().to_vec())?;
                    accumulate(&mut grads, vec![(*x, dx)]);
                }
            }
        }

        let mut result = BTreeMap::new();
        for target in wrt {
            let (node, shape) = match target {
                Wrt::Param(n) => (self.param_nodes.get(n).copied(), params.get(n)?.shape().to_vec()),
                Wrt::Input(n) => {
                    let t = feeds
                        .get(n)
                        .ok_or_else(|| CoreError::MissingInput(n.clone()))?;
                    (self.input_nodes.get(n).copied(), t.shape().to_vec())
                }
            };
            let grad = node.and_then(|id| grads[id].take());
            let grad = match grad {
                Some(g) => g,
                None => {
                    log::warn!(
                        "gradient target '{}' unreachable from loss; returning zeros",
                        target.name()
                    );
                    TensorBase::zeros(&shape)
                }
            };
            result.insert(target.name().to_string(), grad);
        }
        let outputs = extra_outputs
            .iter()
            .map(|&id| values[id].clone().expect("extra output computed"))
            .collect();
        Ok(GradResult { loss: loss_scalar, grads: result, outputs })
    }

    /// Compare reverse-mode gradients against central finite differences.
    ///
    /// Returns, per target, max over elements of
    /// `|g_ad - g_fd| / (|g_fd| + 1e-8)`.
    pub fn finite_diff_check(
        &self,
        params: &mut ParamStoreBase<S>,
        feeds: &Feeds<S>,
        loss: NodeId,
        wrt: &[Wrt],
        h: f64,
    ) -> Result<BTreeMap<String, f64>> {
        if h <= 0.0 {
            return Err(CoreError::InvalidArgument("finite difference step must be positive".into()));
        }
        let ad = self.gradients(params, feeds, loss, wrt, &[])?;
        let mut report = BTreeMap::new();
        let mut feeds_fd = feeds.clone();
        for target in wrt {
            let g_ad = &ad.grads[target.name()];
            let mut worst = 0.0f64;
            for i in 0..g_ad.numel() {
                let mut probe = |delta: f64, params: &mut ParamStoreBase<S>| -> Result<f64> {
                    match target {
                        Wrt::Param(name) => {
                            let orig = params.get(name)?.data()[i];
                            params.get_mut(name)?.data_mut()[i] = orig + S::of(delta);
                            let v = self.evaluate(params, &feeds_fd, &[loss])?[0].scalar_value()?;
                            params.get_mut(name)?.data_mut()[i] = orig;
                            Ok(v.as_f64())
                        }
                        Wrt::Input(name) => {
                            let orig = feeds_fd.get(name).unwrap().data()[i];
                            feeds_fd.get_mut(name).unwrap().data_mut()[i] = orig + S::of(delta);
                            let v = self.evaluate(params, &feeds_fd, &[loss])?[0].scalar_value()?;
                            feeds_fd.get_mut(name).unwrap().data_mut()[i] = orig;
                            Ok(v.as_f64())
                        }
                    }
                };
                let plus = probe(h, params)?;
                let minus = probe(-h, params)?;
                let g_fd = (plus - minus) / (2.0 * h);
                let g = g_ad.data()[i].as_f64();
                let rel = (g - g_fd).abs() / (g_fd.abs() + 1e-8);
                worst = worst.max(rel);
            }
            report.insert(target.name().to_string(), worst);
        }
        Ok(report)
    }
}

fn resolve_shape(node: &str, spec: &[i64], numel: usize) -> Result<Vec<usize>> {
    let mut infer = None;
    let mut known = 1usize;
    for (i, &d) in spec.iter().enumerate() {
        if d == -1 {
            if infer.is_some() {
                return Err(CoreError::ShapeMismatch {
                    node: node.to_string(),
                    detail: "at most one -1 in reshape".into(),
                });
            }
            infer = Some(i);
        } else if d <= 0 {
            return Err(CoreError::ShapeMismatch {
                node: node.to_string(),
                detail: format!("invalid reshape dim {d}"),
            });
        } else {
            known *= d as usize;
        }
    }
    let mut out: Vec<usize> = spec.iter().map(|&d| if d == -1 { 1 } else { d as usize }).collect();
    if let Some(i) = infer {
        if known == 0 || numel % known != 0 {
            return Err(CoreError::ShapeMismatch {
                node: node.to_string(),
                detail: format!("cannot infer dim: {numel} elements vs known {known}"),
            });
        }
        out[i] = numel / known;
    } else if known != numel {
        return Err(CoreError::ShapeMismatch {
            node: node.to_string(),
            detail: format!("reshape to {spec:?} incompatible with {numel} elements"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = GraphBase<f64>;
    type T = TensorBase<f64>;

    #[test]
    fn square_forward_and_gradient() {
        let mut g = G::new();
        let x = g.input("x");
        let y = g.mul(x, x);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::scalar(3.0));
        let params = ParamStoreBase::new();
        let out = g.evaluate(&params, &feeds, &[y]).unwrap();
        assert_eq!(out[0].scalar_value().unwrap(), 9.0);
        let res = g
            .gradients(&params, &feeds, y, &[Wrt::Input("x".into())], &[])
            .unwrap();
        assert_eq!(res.grads["x"].scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        // d(sg(x) * x)/dx = sg(x) = 2, not 2x = 4
        let mut g = G::new();
        let x = g.input("x");
        let sgx = g.stop_gradient(x);
        let y = g.mul(sgx, x);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::scalar(2.0));
        let params = ParamStoreBase::new();
        let res = g
            .gradients(&params, &feeds, y, &[Wrt::Input("x".into())], &[])
            .unwrap();
        assert_eq!(res.grads["x"].scalar_value().unwrap(), 2.0);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut g = G::new();
        let x = g.input("x");
        let sgx = g.stop_gradient(x);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::vector(&[1.5, -2.5, 0.0]));
        let params = ParamStoreBase::new();
        let out = g.evaluate(&params, &feeds, &[sgx]).unwrap();
        assert_eq!(out[0].data(), feeds["x"].data());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = G::new();
        let x = g.input("x");
        let y = g.relu(x);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::vector(&[1.0, 2.0]));
        let params = ParamStoreBase::new();
        let err = g
            .gradients(&params, &feeds, y, &[Wrt::Input("x".into())], &[])
            .unwrap_err();
        assert!(matches!(err, CoreError::NonScalarLoss(_)));
    }

    #[test]
    fn unreachable_wrt_returns_zeros() {
        let mut g = G::new();
        let x = g.input("x");
        let z = g.input("z");
        let _ = z;
        let y = g.mul(x, x);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::scalar(1.0));
        feeds.insert("z".into(), T::vector(&[1.0, 2.0]));
        let params = ParamStoreBase::new();
        let res = g
            .gradients(&params, &feeds, y, &[Wrt::Input("z".into())], &[])
            .unwrap();
        assert_eq!(res.grads["z"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = G::new();
        let a = g.input("a");
        let b = g.input("b");
        let m = g.matmul(a, b);
        g.set_label(m, "bad_matmul");
        let mut feeds = Feeds::new();
        feeds.insert("a".into(), T::matrix(2, 3, vec![0.0; 6]).unwrap());
        feeds.insert("b".into(), T::matrix(2, 3, vec![0.0; 6]).unwrap());
        let params = ParamStoreBase::new();
        let err = g.evaluate(&params, &feeds, &[m]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad_matmul"), "unhelpful error: {msg}");
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let mut g = G::new();
        let x = g.input("x");
        let s = g.softmax(x, 0);
        let e = g.exp(s);
        let mut feeds = Feeds::new();
        feeds.insert("x".into(), T::vector(&[0.3, -1.7, 2.9]));
        let params = ParamStoreBase::new();
        let a = g.evaluate(&params, &feeds, &[e]).unwrap();
        let b = g.evaluate(&params, &feeds, &[e]).unwrap();
        assert_eq!(a[0].data(), b[0].data());
    }

    #[test]
    fn gather_gradient_conserves_sum() {
        let mut g = G::new();
        let table = g.param("table");
        let idx = g.constant(T::vector(&[0.0, 2.0, 2.0]));
        let gathered = g.gather(table, idx);
        let loss_w = g.constant(T::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let weighted = g.mul(gathered, loss_w);
        let loss = g.sum_all(weighted);
        let mut params = ParamStoreBase::new();
        params.set("table", T::matrix(4, 2, vec![0.1; 8]).unwrap());
        let feeds = Feeds::new();
        let res = g
            .gradients(&params, &feeds, loss, &[Wrt::Param("table".into())], &[])
            .unwrap();
        let grad_sum: f64 = res.grads["table"].data().iter().sum();
        // output grads are the weights themselves; scatter must conserve their sum
        assert!((grad_sum - 21.0).abs() < 1e-12);
    }
}
