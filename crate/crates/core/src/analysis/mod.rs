//! Gradient-flow analysis.
//!
//! An edge is *transparent* when the gradient crosses it unchanged up to
//! routing: identity skips of residual sums, concatenation slices, max/avg
//! pooling, nearest up-sampling, channel reduction and the reshaping ops.
//! Convolutions, linear maps, batch norm and the nonlinearities are opaque.
//! A node has *direct* back-propagation when a path of transparent edges
//! leads from it to the loss.
//!
//! The task-specific layers (nodes tagged [`Region::TaskHead`]) are common
//! to every backbone, so their edges count as transparent; the question the
//! analysis answers is about the backbone feeding them.

mod dot;
mod verify;

pub use dot::to_dot;
pub use verify::{verify_direct_bp_numerical, WitnessCheck, WITNESS_TOL};

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeId, Op, Region};
use crate::tensor::Scalar;

/// One input edge `producer → consumer.inputs[port]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub producer: NodeId,
    pub consumer: NodeId,
    pub port: usize,
    pub transparent: bool,
}

/// Whether the gradient reaching `consumer` passes to its `port`-th input
/// unchanged up to routing.
pub fn edge_is_transparent<T>(consumer: &Node<T>, port: usize, loss: Option<NodeId>) -> bool {
    if consumer.tag().region == Region::TaskHead || Some(consumer.id()) == loss {
        return true;
    }
    match consumer.op() {
        Op::Concat
        | Op::MaxPool(_)
        | Op::AvgPool(_)
        | Op::UpsampleNearest { .. }
        | Op::ChannelReduce { .. }
        | Op::GlobalAvgPool
        | Op::Flatten
        | Op::Sum => true,
        Op::Add { skip: Some(j) } => port == *j,
        Op::Add { skip: None } => true,
        Op::Input
        | Op::Parameter
        | Op::Conv2d(_)
        | Op::ChannelMul
        | Op::Relu
        | Op::Sigmoid
        | Op::BatchNorm { .. }
        | Op::Linear
        | Op::SoftmaxXent => false,
    }
}

/// Every edge of the graph, ordered by consumer then port.
pub fn classify_edges<T: Scalar>(graph: &Graph<T>) -> Vec<Edge> {
    classify_edges_for(graph, None)
}

fn classify_edges_for<T: Scalar>(graph: &Graph<T>, loss: Option<NodeId>) -> Vec<Edge> {
    graph
        .nodes()
        .iter()
        .flat_map(|n| {
            n.inputs().iter().enumerate().map(move |(port, &producer)| Edge {
                producer,
                consumer: n.id(),
                port,
                transparent: edge_is_transparent(n, port, loss),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Direct,
    Blocked,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Direct => "direct",
            Verdict::Blocked => "blocked",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IConvKind {
    /// Sits on the only route between two features, as a transition
    /// `x_{s+1} = h(x_s)` does.
    Transition,
    /// Replaces the identity on the skip side of a residual sum.
    SkipProjection,
}

impl IConvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IConvKind::Transition => "transition",
            IConvKind::SkipProjection => "skip_projection",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IConv {
    pub node: NodeId,
    pub kind: IConvKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BPReport {
    pub loss: NodeId,
    verdicts: Vec<Verdict>,
    /// Consumer through which each direct node was first reached.
    next: Vec<Option<NodeId>>,
    pub iconvs: Vec<IConv>,
}

impl BPReport {
    pub fn verdict(&self, id: NodeId) -> Verdict {
        self.verdicts[id.0]
    }

    pub fn is_direct(&self, id: NodeId) -> bool {
        self.verdicts[id.0] == Verdict::Direct
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    /// Transparent path `[id, …, loss]`, or `None` for blocked nodes.
    pub fn witness(&self, id: NodeId) -> Option<Vec<NodeId>> {
        if !self.is_direct(id) {
            return None;
        }
        let mut path = vec![id];
        let mut cur = id;
        while let Some(n) = self.next[cur.0] {
            path.push(n);
            cur = n;
        }
        Some(path)
    }

    /// Ids of the flagged I-convs.
    pub fn blocking_nodes(&self) -> Vec<NodeId> {
        self.iconvs.iter().map(|c| c.node).collect()
    }

    pub fn is_iconv(&self, id: NodeId) -> bool {
        self.iconvs.iter().any(|c| c.node == id)
    }
}

/// Reverse reachability from `loss` over transparent edges, plus the list
/// of isolated convolutions.
pub fn analyze<T: Scalar>(graph: &Graph<T>, loss: NodeId) -> Result<BPReport> {
    if loss.0 >= graph.len() {
        return Err(Error::Graph(format!("unknown loss node {loss}")));
    }
    let node = graph.node(loss);
    if node.shape().iter().product::<usize>() != 1 {
        return Err(Error::ShapeMismatch {
            node: node.name().to_string(),
            expected: "a scalar loss".into(),
            actual: node.shape().to_vec(),
        });
    }
    let n = graph.len();
    let mut verdicts = vec![Verdict::Blocked; n];
    let mut next = vec![None; n];
    verdicts[loss.0] = Verdict::Direct;
    let mut queue = VecDeque::from([loss]);
    while let Some(u) = queue.pop_front() {
        let un = graph.node(u);
        for (port, &v) in un.inputs().iter().enumerate() {
            if verdicts[v.0] == Verdict::Blocked && edge_is_transparent(un, port, Some(loss)) {
                verdicts[v.0] = Verdict::Direct;
                next[v.0] = Some(u);
                queue.push_back(v);
            }
        }
    }
    let iconvs = find_iconvs(graph, loss);
    Ok(BPReport {
        loss,
        verdicts,
        next,
        iconvs,
    })
}

/// Ops that act inside a residual function or a gate rather than produce a
/// feature of the network: they are looked through when locating the
/// features a convolution maps between.
fn is_inner(op: &Op) -> bool {
    matches!(
        op,
        Op::Conv2d(_) | Op::BatchNorm { .. } | Op::Relu | Op::Sigmoid | Op::Linear | Op::GlobalAvgPool
    )
}

/// The feature a chain of inner ops reads, and the inner nodes on the way.
fn feature_source<T: Scalar>(graph: &Graph<T>, mut id: NodeId) -> (NodeId, Vec<NodeId>) {
    let mut chain = Vec::new();
    while is_inner(graph.node(id).op()) {
        chain.push(id);
        id = graph.node(id).inputs()[0];
    }
    (id, chain)
}

/// Feature-level uses `(consumer, port)` of the output of `conv`, looking
/// through inner ops. Ports other than the data input of an inner op
/// (weights, affine parameters) never carry features and are skipped.
fn feature_sinks<T: Scalar>(graph: &Graph<T>, consumers: &[Vec<NodeId>], conv: NodeId) -> Vec<(NodeId, usize)> {
    let mut sinks = Vec::new();
    let mut stack = vec![conv];
    let mut seen = vec![false; graph.len()];
    while let Some(x) = stack.pop() {
        for &c in &consumers[x.0] {
            let cn = graph.node(c);
            for (port, _) in cn.inputs().iter().enumerate().filter(|(_, &i)| i == x) {
                if is_inner(cn.op()) && cn.tag().region != Region::TaskHead {
                    if port == 0 && !std::mem::replace(&mut seen[c.0], true) {
                        stack.push(c);
                    }
                } else {
                    sinks.push((c, port));
                }
            }
        }
    }
    sinks.sort();
    sinks.dedup();
    sinks
}

/// Forward closure of `from` over transparent edges.
fn transparent_reach<T: Scalar>(graph: &Graph<T>, consumers: &[Vec<NodeId>], from: NodeId, loss: NodeId) -> Vec<bool> {
    let mut seen = vec![false; graph.len()];
    seen[from.0] = true;
    let mut stack = vec![from];
    while let Some(x) = stack.pop() {
        for &c in &consumers[x.0] {
            let cn = graph.node(c);
            let through = cn
                .inputs()
                .iter()
                .enumerate()
                .any(|(port, &i)| i == x && edge_is_transparent(cn, port, Some(loss)));
            if through && !seen[c.0] {
                seen[c.0] = true;
                stack.push(c);
            }
        }
    }
    seen
}

/// A convolution between features is isolated unless each of its feature
/// uses is bypassed: it is the residual side of a sum whose other operand
/// is the skip, or the feature it reads also reaches the same consumer
/// through transparent edges (a concatenation partner, for instance).
/// Convolutions that only produce a gate for a channel product, stem
/// convolutions reading the raw input, and task-head convolutions are not
/// between features and are not considered.
fn find_iconvs<T: Scalar>(graph: &Graph<T>, loss: NodeId) -> Vec<IConv> {
    let consumers = graph.consumers();
    let mut out = Vec::new();
    for node in graph.nodes() {
        if !matches!(node.op(), Op::Conv2d(_)) || matches!(node.tag().region, Region::TaskHead | Region::Stem) {
            continue;
        }
        let (source, _) = feature_source(graph, node.inputs()[0]);
        let sinks = feature_sinks(graph, &consumers, node.id());
        if sinks.is_empty() || sinks.iter().all(|&(c, port)| *graph.node(c).op() == Op::ChannelMul && port == 1) {
            continue;
        }
        let reach = transparent_reach(graph, &consumers, source, loss);
        let mut kind = None;
        for &(c, port) in &sinks {
            let cn = graph.node(c);
            let verdict = match cn.op() {
                Op::Add { skip: Some(j) } if port != *j => None,
                Op::Add { skip: Some(j) } => {
                    let branch = cn.inputs()[1 - *j];
                    let (bsrc, chain) = feature_source(graph, branch);
                    if bsrc == source && !chain.contains(&node.id()) {
                        Some(IConvKind::SkipProjection)
                    } else {
                        Some(IConvKind::Transition)
                    }
                }
                _ if reach[c.0] => None,
                _ => Some(IConvKind::Transition),
            };
            if verdict.is_some() {
                kind = verdict;
                break;
            }
        }
        if let Some(kind) = kind {
            out.push(IConv { node: node.id(), kind });
        }
    }
    out
}
