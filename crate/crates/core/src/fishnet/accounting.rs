//! Parameter and FLOP counts.
//!
//! FLOPs are per example and count a multiply-add as two operations:
//! convolution `2·kh·kw·(Cin/groups)·Cout·H'·W'`, linear `2·in·out`.
//! Batch norm, activations, pooling, sums and the loss count as zero.

use crate::graph::{Graph, Node, Op};
use crate::tensor::{shape_string, Scalar};

pub fn count_params<T: Scalar>(graph: &Graph<T>) -> u64 {
    graph
        .nodes()
        .iter()
        .filter(|n| *n.op() == Op::Parameter)
        .map(|n| n.shape().iter().product::<usize>() as u64)
        .sum()
}

/// FLOPs of one node for a single example, using the node shapes fixed at
/// construction.
pub fn node_flops<T: Scalar>(graph: &Graph<T>, node: &Node<T>) -> u64 {
    match node.op() {
        Op::Conv2d(_) => {
            // weight is [Cout, Cin/groups, kh, kw]
            let w = graph.node(node.inputs()[1]).shape();
            let out = node.shape();
            2 * (w.iter().product::<usize>() * out[2] * out[3]) as u64
        }
        Op::Linear => {
            let w = graph.node(node.inputs()[1]).shape();
            2 * (w[0] * w[1]) as u64
        }
        _ => 0,
    }
}

pub fn count_flops<T: Scalar>(graph: &Graph<T>) -> u64 {
    graph.nodes().iter().map(|n| node_flops(graph, n)).sum()
}

/// One row per computed node: id, name, kind, region, output shape,
/// parameters owned through direct parameter inputs, FLOPs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub id: usize,
    pub name: String,
    pub kind: &'static str,
    pub region: &'static str,
    pub stage: Option<usize>,
    pub shape: String,
    pub params: u64,
    pub flops: u64,
}

pub fn layer_table<T: Scalar>(graph: &Graph<T>) -> Vec<LayerRow> {
    graph
        .nodes()
        .iter()
        .filter(|n| *n.op() != Op::Parameter)
        .map(|n| LayerRow {
            id: n.id().0,
            name: n.name().to_string(),
            kind: n.kind().as_str(),
            region: n.tag().region.as_str(),
            stage: n.tag().stage,
            shape: shape_string(&n.shape()[1..]),
            params: n
                .inputs()
                .iter()
                .map(|&i| graph.node(i))
                .filter(|p| *p.op() == Op::Parameter)
                .map(|p| p.shape().iter().product::<usize>() as u64)
                .sum(),
            flops: node_flops(graph, n),
        })
        .collect()
}
