//! Computational graph of typed operations.
//!
//! Nodes are appended in topological order: every node's inputs have
//! smaller ids. Construction validates attributes and infers the nominal
//! output shape; [`Graph::forward`] recomputes values (the batch dimension
//! may differ from the nominal one) and [`Graph::backward`] runs
//! reverse-mode differentiation over the same node list, accumulating
//! gradients of nodes with several consumers by summation.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::channel::{channel_reduce_backward, channel_reduce_forward, concat_backward, concat_forward};
use crate::ops::conv::{conv2d_backward, conv2d_forward};
use crate::ops::dense::{linear_backward, linear_forward, softmax_xent_backward, softmax_xent_forward};
use crate::ops::elementwise::*;
use crate::ops::norm::{batchnorm_backward, batchnorm_forward, BnCache};
use crate::ops::pool::*;
use crate::ops::{Conv2dParams, PoolParams, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::{check_shape, shape_string, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Parameter,
    Conv2d,
    MaxPool,
    AvgPool,
    UpsampleNearest,
    Concat,
    ChannelReduce,
    Add,
    ChannelMul,
    Relu,
    Sigmoid,
    BatchNorm,
    Linear,
    GlobalAvgPool,
    Flatten,
    Sum,
    SoftmaxXent,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Parameter => "parameter",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Concat => "concat",
            OpKind::ChannelReduce => "channel_reduce",
            OpKind::Add => "add",
            OpKind::ChannelMul => "channel_mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Linear => "linear",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Flatten => "flatten",
            OpKind::Sum => "sum",
            OpKind::SoftmaxXent => "softmax_xent",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Parameter,
    Conv2d(Conv2dParams),
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    UpsampleNearest { factor: usize },
    Concat,
    ChannelReduce { k: usize },
    /// `skip` marks which input is the identity/shortcut path of a residual
    /// unit; `None` for a plain sum.
    Add { skip: Option<usize> },
    ChannelMul,
    Relu,
    Sigmoid,
    BatchNorm { eps: f64, momentum: f64 },
    Linear,
    GlobalAvgPool,
    Flatten,
    Sum,
    SoftmaxXent,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Parameter => OpKind::Parameter,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::Concat => OpKind::Concat,
            Op::ChannelReduce { .. } => OpKind::ChannelReduce,
            Op::Add { .. } => OpKind::Add,
            Op::ChannelMul => OpKind::ChannelMul,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Linear => OpKind::Linear,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Flatten => OpKind::Flatten,
            Op::Sum => OpKind::Sum,
            Op::SoftmaxXent => OpKind::SoftmaxXent,
        }
    }
}

/// Which part of a network a node belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Region {
    #[default]
    Other,
    Stem,
    Tail,
    Bridge,
    Body,
    Head,
    /// The task-specific layers between the last feature and the loss.
    TaskHead,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Other => "other",
            Region::Stem => "stem",
            Region::Tail => "tail",
            Region::Bridge => "bridge",
            Region::Body => "body",
            Region::Head => "head",
            Region::TaskHead => "task_head",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Tag {
    pub region: Region,
    pub stage: Option<usize>,
}

impl Tag {
    pub fn new(region: Region, stage: impl Into<Option<usize>>) -> Self {
        Self {
            region,
            stage: stage.into(),
        }
    }
}

#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    Argmax(Vec<usize>),
    Bn(BnCache<T>),
    Probs(Vec<T>),
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    id: NodeId,
    name: String,
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    tag: Tag,
    requires_grad: bool,
    value: Option<Tensor<T>>,
    grad: Option<Tensor<T>>,
    saved: Saved<T>,
    running: Option<RunningStats<T>>,
}

impl<T> Node<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    /// Shape inferred at construction (batch dim from the declared input).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn value(&self) -> Option<&Tensor<T>> {
        self.value.as_ref()
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn running_stats(&self) -> Option<&RunningStats<T>> {
        self.running.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    by_name: HashMap<String, NodeId>,
    scope: Tag,
    training: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            by_name: HashMap::new(),
            scope: Tag::default(),
            training: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// Tag applied to every node created from now on.
    pub fn set_scope(&mut self, tag: Tag) {
        self.scope = tag;
    }

    pub fn scope(&self) -> Tag {
        self.scope
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Parameter)
            .map(|n| n.id)
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(|n| n.op == Op::Input).map(|n| n.id)
    }

    /// For every node, the nodes that read it, in id order.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                if out[i.0].last() != Some(&node.id) {
                    out[i.0].push(node.id);
                }
            }
        }
        out
    }

    pub fn set_requires_grad(&mut self, id: NodeId, flag: bool) {
        self.nodes[id.0].requires_grad = flag;
    }

    /// Feed an input or overwrite a parameter. Input values may change the
    /// batch dimension; every other dim must match the declaration.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        let ok = match node.op {
            Op::Input => {
                value.shape().len() == node.shape.len() && value.shape()[1..] == node.shape[1..]
            }
            Op::Parameter => value.shape() == node.shape.as_slice(),
            _ => {
                return Err(Error::Graph(format!(
                    "cannot assign a value to computed node `{}`",
                    node.name
                )))
            }
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                expected: shape_string(&node.shape),
                actual: value.shape().to_vec(),
            });
        }
        node.value = Some(value);
        Ok(())
    }

    /// Same structure in another precision. Parameters, input values and
    /// running statistics are converted; computed values and grads are
    /// dropped.
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                id: n.id,
                name: n.name.clone(),
                op: n.op.clone(),
                inputs: n.inputs.clone(),
                shape: n.shape.clone(),
                tag: n.tag,
                requires_grad: n.requires_grad,
                value: match n.op {
                    Op::Input | Op::Parameter => n.value.as_ref().map(Tensor::cast),
                    _ => None,
                },
                grad: None,
                saved: Saved::None,
                running: n.running.as_ref().map(|r| RunningStats {
                    mean: r.mean.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    var: r.var.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                }),
            })
            .collect();
        Graph {
            nodes,
            by_name: self.by_name.clone(),
            scope: self.scope,
            training: self.training,
        }
    }

    pub fn param_mut(&mut self, id: NodeId) -> &mut Tensor<T> {
        let node = &mut self.nodes[id.0];
        assert_eq!(node.op, Op::Parameter, "`{}` is not a parameter", node.name);
        node.value.as_mut().expect("parameters always hold a value")
    }

    pub(crate) fn replace_grad(&mut self, id: NodeId, data: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if let Some(g) = node.grad.as_mut() {
            g.data_mut().copy_from_slice(&data);
        }
    }

    pub fn running_stats_mut(&mut self, id: NodeId) -> Option<&mut RunningStats<T>> {
        self.nodes[id.0].running.as_mut()
    }

    // ---- construction -------------------------------------------------

    fn push(
        &mut self,
        name: String,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Option<Tensor<T>>,
    ) -> Result<NodeId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate node name `{name}`")));
        }
        check_shape(&shape).map_err(|_| Error::ShapeMismatch {
            node: name.clone(),
            expected: "all dims >= 1".into(),
            actual: shape.clone(),
        })?;
        let id = NodeId(self.nodes.len());
        let requires_grad = op == Op::Parameter;
        let running = match op {
            Op::BatchNorm { .. } => Some(RunningStats::new(shape[1])),
            _ => None,
        };
        self.by_name.insert(name.clone(), id);
        self.nodes.push(Node {
            id,
            name,
            op,
            inputs,
            shape,
            tag: self.scope,
            requires_grad,
            value,
            grad: None,
            saved: Saved::None,
            running,
        });
        Ok(id)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn check_input(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {id}")));
        }
        Ok(())
    }

    fn expect_rank4(&self, name: &str, id: NodeId) -> Result<[usize; 4]> {
        self.check_input(id)?;
        match *self.shape_of(id) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref other => Err(Error::ShapeMismatch {
                node: name.to_string(),
                expected: "an N×C×H×W input".into(),
                actual: other.to_vec(),
            }),
        }
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.push(name.into(), Op::Input, vec![], shape.to_vec(), None)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        let shape = value.shape().to_vec();
        self.push(name.into(), Op::Parameter, vec![], shape, Some(value))
    }

    pub fn conv2d(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        weight: NodeId,
        params: Conv2dParams,
    ) -> Result<NodeId> {
        let name = name.into();
        let [n, cin, h, w] = self.expect_rank4(&name, x)?;
        let [cout, cin_g, kh, kw] = self.expect_rank4(&name, weight)?;
        let attr = |message: String| Error::Attr {
            node: name.clone(),
            message,
        };
        if params.stride == 0 || params.dilation == 0 || params.groups == 0 {
            return Err(attr("stride, dilation and groups must be >= 1".into()));
        }
        if cin % params.groups != 0 || cout % params.groups != 0 {
            return Err(attr(format!(
                "groups {} must divide both channel counts ({cin} in, {cout} out)",
                params.groups
            )));
        }
        if cin_g != cin / params.groups {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("weight [{cout}, {}, {kh}, {kw}]", cin / params.groups),
                actual: self.shape_of(weight).to_vec(),
            });
        }
        let (Some(ho), Some(wo)) = (params.out_dim(h, kh), params.out_dim(w, kw)) else {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("spatial input large enough for a {kh}×{kw} kernel"),
                actual: vec![n, cin, h, w],
            });
        };
        self.push(name, Op::Conv2d(params), vec![x, weight], vec![n, cout, ho, wo], None)
    }

    fn pool(&mut self, name: String, x: NodeId, params: PoolParams, max: bool) -> Result<NodeId> {
        let [n, c, h, w] = self.expect_rank4(&name, x)?;
        if params.stride == 0 || params.kernel == 0 || params.padding >= params.kernel {
            return Err(Error::Attr {
                node: name,
                message: format!("invalid pooling window {params:?}"),
            });
        }
        let (Some(ho), Some(wo)) = (params.out_dim(h), params.out_dim(w)) else {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("spatial dims >= kernel {}", params.kernel),
                actual: vec![n, c, h, w],
            });
        };
        let op = if max {
            Op::MaxPool(params)
        } else {
            Op::AvgPool(params)
        };
        self.push(name, op, vec![x], vec![n, c, ho, wo], None)
    }

    pub fn maxpool(&mut self, name: impl Into<String>, x: NodeId, params: PoolParams) -> Result<NodeId> {
        self.pool(name.into(), x, params, true)
    }

    pub fn avgpool(&mut self, name: impl Into<String>, x: NodeId, params: PoolParams) -> Result<NodeId> {
        self.pool(name.into(), x, params, false)
    }

    pub fn upsample_nearest(&mut self, name: impl Into<String>, x: NodeId, factor: usize) -> Result<NodeId> {
        let name = name.into();
        let [n, c, h, w] = self.expect_rank4(&name, x)?;
        if factor == 0 {
            return Err(Error::Attr {
                node: name,
                message: "up-sampling factor must be >= 1".into(),
            });
        }
        self.push(
            name,
            Op::UpsampleNearest { factor },
            vec![x],
            vec![n, c, h * factor, w * factor],
            None,
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, name: impl Into<String>, xs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if xs.is_empty() {
            return Err(Error::Graph(format!("`{name}`: concat needs at least one input")));
        }
        for &x in xs {
            self.check_input(x)?;
        }
        let first = self.shape_of(xs[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: "rank >= 2".into(),
                actual: first,
            });
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape_of(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::ShapeMismatch {
                    node: name,
                    expected: format!("non-channel dims matching {}", shape_string(&first)),
                    actual: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let mut shape = first;
        shape[1] = channels;
        self.push(name, Op::Concat, xs.to_vec(), shape, None)
    }

    pub fn channel_reduce(&mut self, name: impl Into<String>, x: NodeId, k: usize) -> Result<NodeId> {
        let name = name.into();
        let [n, c, h, w] = self.expect_rank4(&name, x)?;
        if k == 0 || c % k != 0 {
            return Err(Error::Attr {
                node: name,
                message: format!("channel count {c} is not divisible by reduction rate {k}"),
            });
        }
        self.push(name, Op::ChannelReduce { k }, vec![x], vec![n, c / k, h, w], None)
    }

    /// Plain elementwise sum of same-shaped inputs.
    pub fn add(&mut self, name: impl Into<String>, xs: &[NodeId]) -> Result<NodeId> {
        self.add_impl(name.into(), xs, None)
    }

    /// `skip + branch`, recording which operand is the shortcut.
    pub fn residual_add(&mut self, name: impl Into<String>, skip: NodeId, branch: NodeId) -> Result<NodeId> {
        self.add_impl(name.into(), &[skip, branch], Some(0))
    }

    fn add_impl(&mut self, name: String, xs: &[NodeId], skip: Option<usize>) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Graph(format!("`{name}`: add needs at least one input")));
        }
        for &x in xs {
            self.check_input(x)?;
        }
        let shape = self.shape_of(xs[0]).to_vec();
        for &x in &xs[1..] {
            if self.shape_of(x) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: name,
                    expected: shape_string(&shape),
                    actual: self.shape_of(x).to_vec(),
                });
            }
        }
        self.push(name, Op::Add { skip }, xs.to_vec(), shape, None)
    }

    /// `x ⊙ gate`, gate of shape N×C×1×1.
    pub fn channel_mul(&mut self, name: impl Into<String>, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let name = name.into();
        let [n, c, h, w] = self.expect_rank4(&name, x)?;
        let g = self.expect_rank4(&name, gate)?;
        if g != [n, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("gate {n}×{c}×1×1"),
                actual: g.to_vec(),
            });
        }
        self.push(name, Op::ChannelMul, vec![x, gate], vec![n, c, h, w], None)
    }

    fn unary(&mut self, name: String, x: NodeId, op: Op) -> Result<NodeId> {
        self.check_input(x)?;
        let shape = self.shape_of(x).to_vec();
        self.push(name, op, vec![x], shape, None)
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> Result<NodeId> {
        self.unary(name.into(), x, Op::Relu)
    }

    pub fn sigmoid(&mut self, name: impl Into<String>, x: NodeId) -> Result<NodeId> {
        self.unary(name.into(), x, Op::Sigmoid)
    }

    pub fn batchnorm(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId> {
        let name = name.into();
        self.check_input(x)?;
        let shape = self.shape_of(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: "rank >= 2".into(),
                actual: shape,
            });
        }
        for p in [gamma, beta] {
            self.check_input(p)?;
            if self.shape_of(p) != [shape[1]] {
                return Err(Error::ShapeMismatch {
                    node: name,
                    expected: format!("affine parameter [{}]", shape[1]),
                    actual: self.shape_of(p).to_vec(),
                });
            }
        }
        self.push(
            name,
            Op::BatchNorm {
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            vec![x, gamma, beta],
            shape,
            None,
        )
    }

    pub fn linear(&mut self, name: impl Into<String>, x: NodeId, weight: NodeId) -> Result<NodeId> {
        let name = name.into();
        self.check_input(x)?;
        self.check_input(weight)?;
        let xs = self.shape_of(x);
        let fan_in: usize = xs[1..].iter().product();
        let n = xs[0];
        let ws = self.shape_of(weight);
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("weight [out, {fan_in}]"),
                actual: ws.to_vec(),
            });
        }
        let out = ws[0];
        self.push(name, Op::Linear, vec![x, weight], vec![n, out], None)
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, x: NodeId) -> Result<NodeId> {
        let name = name.into();
        let [n, c, _, _] = self.expect_rank4(&name, x)?;
        self.push(name, Op::GlobalAvgPool, vec![x], vec![n, c, 1, 1], None)
    }

    pub fn flatten(&mut self, name: impl Into<String>, x: NodeId) -> Result<NodeId> {
        let name = name.into();
        self.check_input(x)?;
        let s = self.shape_of(x);
        let shape = vec![s[0], s[1..].iter().product()];
        self.push(name, Op::Flatten, vec![x], shape, None)
    }

    pub fn sum(&mut self, name: impl Into<String>, x: NodeId) -> Result<NodeId> {
        let name = name.into();
        self.check_input(x)?;
        self.push(name, Op::Sum, vec![x], vec![1], None)
    }

    /// Mean cross-entropy of `logits` (N×classes) against the class indices
    /// fed into `labels` (an input of shape [N]).
    pub fn softmax_xent(&mut self, name: impl Into<String>, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let name = name.into();
        self.check_input(logits)?;
        self.check_input(labels)?;
        let ls = self.shape_of(logits);
        let ys = self.shape_of(labels);
        if ls.len() != 2 || ys != [ls[0]] {
            return Err(Error::ShapeMismatch {
                node: name,
                expected: format!("logits N×C and labels [N], logits {}", shape_string(ls)),
                actual: ys.to_vec(),
            });
        }
        self.push(name, Op::SoftmaxXent, vec![logits, labels], vec![1], None)
    }

    // ---- execution ----------------------------------------------------

    /// Evaluate every computed node.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            self.eval_node(i)?;
        }
        Ok(())
    }

    /// Evaluate only the ancestors of `target` (and `target` itself).
    pub fn forward_to(&mut self, target: NodeId) -> Result<()> {
        let mut needed = vec![false; target.0 + 1];
        needed[target.0] = true;
        for i in (0..=target.0).rev() {
            if needed[i] {
                for &inp in &self.nodes[i].inputs {
                    needed[inp.0] = true;
                }
            }
        }
        for (i, _) in needed.iter().enumerate().filter(|(_, &n)| n) {
            self.eval_node(i)?;
        }
        Ok(())
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let training = self.training;
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let val = |id: NodeId| -> Result<&Tensor<T>> {
            before[id.0].value.as_ref().ok_or_else(|| {
                Error::Graph(format!(
                    "`{}` has no value (input not fed?)",
                    before[id.0].name
                ))
            })
        };
        let mut saved = Saved::None;
        let out = match &node.op {
            Op::Input => {
                if node.value.is_none() {
                    return Err(Error::Graph(format!("input `{}` was not fed", node.name)));
                }
                return Ok(());
            }
            Op::Parameter => return Ok(()),
            Op::Conv2d(p) => conv2d_forward(val(node.inputs[0])?, val(node.inputs[1])?, p),
            Op::MaxPool(p) => {
                let (out, arg) = maxpool_forward(val(node.inputs[0])?, p);
                saved = Saved::Argmax(arg);
                out
            }
            Op::AvgPool(p) => avgpool_forward(val(node.inputs[0])?, p),
            Op::UpsampleNearest { factor } => upsample_nearest_forward(val(node.inputs[0])?, *factor),
            Op::Concat => {
                let xs = node.inputs.iter().map(|&x| val(x)).collect::<Result<Vec<_>>>()?;
                check_batch(&node.name, &xs)?;
                concat_forward(&xs)
            }
            Op::ChannelReduce { k } => channel_reduce_forward(val(node.inputs[0])?, *k),
            Op::Add { .. } => {
                let xs = node.inputs.iter().map(|&x| val(x)).collect::<Result<Vec<_>>>()?;
                check_batch(&node.name, &xs)?;
                add_forward(&xs)
            }
            Op::ChannelMul => {
                let (x, g) = (val(node.inputs[0])?, val(node.inputs[1])?);
                check_batch(&node.name, &[x, g])?;
                channel_mul_forward(x, g)
            }
            Op::Relu => relu_forward(val(node.inputs[0])?),
            Op::Sigmoid => sigmoid_forward(val(node.inputs[0])?),
            Op::BatchNorm { eps, momentum } => {
                let running = node.running.as_mut().expect("batchnorm keeps running stats");
                let (out, cache) = batchnorm_forward(
                    val(node.inputs[0])?,
                    val(node.inputs[1])?,
                    val(node.inputs[2])?,
                    running,
                    training,
                    *eps,
                    *momentum,
                );
                saved = Saved::Bn(cache);
                out
            }
            Op::Linear => linear_forward(val(node.inputs[0])?, val(node.inputs[1])?),
            Op::GlobalAvgPool => global_avg_pool_forward(val(node.inputs[0])?),
            Op::Flatten => {
                let x = val(node.inputs[0])?;
                let n = x.shape()[0];
                x.clone().reshape(&[n, x.numel() / n])?
            }
            Op::Sum => Tensor::scalar(val(node.inputs[0])?.sum()),
            Op::SoftmaxXent => {
                let logits = val(node.inputs[0])?;
                let labels = labels_of(&node.name, val(node.inputs[1])?, logits)?;
                let (loss, probs) = softmax_xent_forward(logits, &labels);
                saved = Saved::Probs(probs);
                Tensor::scalar(loss)
            }
        };
        node.value = Some(out);
        node.saved = saved;
        Ok(())
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let node = &self.nodes[loss.0];
        let value = node
            .value
            .as_ref()
            .ok_or_else(|| Error::Graph(format!("loss `{}` has not been evaluated", node.name)))?;
        if value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                expected: "a scalar loss".into(),
                actual: value.shape().to_vec(),
            });
        }
        let seed = Tensor::new(value.shape(), vec![T::one()])?;
        self.backward_with(loss, seed)
    }

    /// Backpropagate an explicit output gradient `seed` from `from`.
    pub fn backward_with(&mut self, from: NodeId, seed: Tensor<T>) -> Result<()> {
        let needs = self.needs_grad();
        for node in &mut self.nodes {
            node.grad = None;
        }
        if seed.shape() != self.nodes[from.0].value.as_ref().map(|v| v.shape()).unwrap_or(&[]) {
            return Err(Error::ShapeMismatch {
                node: self.nodes[from.0].name.clone(),
                expected: "seed gradient shaped like the node value".into(),
                actual: seed.shape().to_vec(),
            });
        }
        self.nodes[from.0].grad = Some(seed);
        for i in (0..=from.0).rev() {
            if !needs[i] {
                continue;
            }
            let contributions = match self.nodes[i].grad.as_ref() {
                Some(g) => self.input_grads(i, g, &needs)?,
                None => continue,
            };
            for (id, g) in contributions {
                match self.nodes[id.0].grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => self.nodes[id.0].grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = node.requires_grad || node.inputs.iter().any(|&x| needs[x.0]);
        }
        needs
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let val = |id: NodeId| -> &Tensor<T> {
            self.nodes[id.0].value.as_ref().expect("forward ran before backward")
        };
        let want = |k: usize| needs[inputs[k].0];
        let mut out = Vec::with_capacity(inputs.len());
        match &node.op {
            Op::Input | Op::Parameter => {}
            Op::Conv2d(p) => {
                let (dx, dw) = conv2d_backward(val(inputs[0]), val(inputs[1]), p, g, want(0), want(1));
                out.extend(dx.map(|d| (inputs[0], d)));
                out.extend(dw.map(|d| (inputs[1], d)));
            }
            Op::MaxPool(_) => {
                let Saved::Argmax(arg) = &node.saved else {
                    return Err(missing_cache(node));
                };
                out.push((inputs[0], maxpool_backward(val(inputs[0]).shape(), arg, g)));
            }
            Op::AvgPool(p) => out.push((inputs[0], avgpool_backward(val(inputs[0]).shape(), p, g))),
            Op::UpsampleNearest { factor } => {
                out.push((inputs[0], upsample_nearest_backward(val(inputs[0]).shape(), *factor, g)))
            }
            Op::Concat => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&x| val(x).shape()).collect();
                for (k, d) in concat_backward(&shapes, g).into_iter().enumerate() {
                    if want(k) {
                        out.push((inputs[k], d));
                    }
                }
            }
            Op::ChannelReduce { k } => {
                out.push((inputs[0], channel_reduce_backward(val(inputs[0]).shape(), *k, g)))
            }
            Op::Add { .. } => {
                for (k, &x) in inputs.iter().enumerate() {
                    if want(k) {
                        out.push((x, g.clone()));
                    }
                }
            }
            Op::ChannelMul => {
                let (dx, dgate) = channel_mul_backward(val(inputs[0]), val(inputs[1]), g);
                out.push((inputs[0], dx));
                out.push((inputs[1], dgate));
            }
            Op::Relu => out.push((inputs[0], relu_backward(val(inputs[0]), g))),
            Op::Sigmoid => {
                let y = node.value.as_ref().expect("evaluated");
                out.push((inputs[0], sigmoid_backward(y, g)));
            }
            Op::BatchNorm { .. } => {
                let Saved::Bn(cache) = &node.saved else {
                    return Err(missing_cache(node));
                };
                let (dx, dgamma, dbeta) = batchnorm_backward(val(inputs[0]).shape(), val(inputs[1]), cache, g);
                out.push((inputs[0], dx));
                out.push((inputs[1], dgamma));
                out.push((inputs[2], dbeta));
            }
            Op::Linear => {
                let (dx, dw) = linear_backward(val(inputs[0]), val(inputs[1]), g);
                out.push((inputs[0], dx));
                out.push((inputs[1], dw));
            }
            Op::GlobalAvgPool => out.push((inputs[0], global_avg_pool_backward(val(inputs[0]).shape(), g))),
            Op::Flatten => out.push((inputs[0], g.clone().reshape(val(inputs[0]).shape())?)),
            Op::Sum => out.push((inputs[0], Tensor::full(val(inputs[0]).shape(), g.data()[0]))),
            Op::SoftmaxXent => {
                let Saved::Probs(probs) = &node.saved else {
                    return Err(missing_cache(node));
                };
                let logits = val(inputs[0]);
                let labels = labels_of(&node.name, val(inputs[1]), logits)?;
                out.push((
                    inputs[0],
                    softmax_xent_backward(logits.shape(), probs, &labels, g.data()[0]),
                ));
            }
        }
        out.retain(|(id, _)| needs[id.0]);
        Ok(out)
    }

    /// First node, in evaluation order, whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.value.as_ref().is_some_and(|v| !v.is_finite()))
            .map(|n| n.id)
    }
}

fn missing_cache<T>(node: &Node<T>) -> Error {
    Error::Graph(format!("`{}` has no forward cache; run forward first", node.name))
}

fn check_batch<T: Scalar>(name: &str, xs: &[&Tensor<T>]) -> Result<()> {
    let n = xs[0].shape()[0];
    match xs.iter().find(|x| x.shape()[0] != n) {
        Some(x) => Err(Error::ShapeMismatch {
            node: name.to_string(),
            expected: format!("batch size {n}"),
            actual: x.shape().to_vec(),
        }),
        None => Ok(()),
    }
}

fn labels_of<T: Scalar>(name: &str, labels: &Tensor<T>, logits: &Tensor<T>) -> Result<Vec<usize>> {
    let n = logits.shape()[0];
    let classes = logits.numel() / n;
    if labels.numel() != n {
        return Err(Error::ShapeMismatch {
            node: name.to_string(),
            expected: format!("{n} labels"),
            actual: labels.shape().to_vec(),
        });
    }
    labels
        .data()
        .iter()
        .map(|&v| {
            let f = v.to_f64_lossy();
            if f < 0.0 || f.fract() != 0.0 || f as usize >= classes {
                Err(Error::Graph(format!(
                    "`{name}`: label {f} is not a class index below {classes}"
                )))
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}
