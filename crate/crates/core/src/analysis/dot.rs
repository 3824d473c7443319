use std::fmt::Write;

use super::{edge_is_transparent, BPReport};
use crate::graph::{Graph, Op};
use crate::tensor::{shape_string, Scalar};

/// DOT rendering. Nodes are labelled with their op kind and shape;
/// parameters are left out. With a report, I-convs are filled red, blocked
/// nodes drawn grey and opaque edges dashed.
pub fn to_dot<T: Scalar>(graph: &Graph<T>, report: Option<&BPReport>) -> String {
    let mut s = String::from("digraph fishnet {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
    let loss = report.map(|r| r.loss);
    for n in graph.nodes() {
        if *n.op() == Op::Parameter {
            continue;
        }
        let mut attrs = format!(
            "label=\"{}\\n{}\", tooltip=\"{}\"",
            n.kind(),
            shape_string(n.shape()),
            n.name().replace('"', "'")
        );
        if let Some(r) = report {
            if r.is_iconv(n.id()) {
                attrs.push_str(", style=filled, fillcolor=\"#ff6666\", color=red");
            } else if !r.is_direct(n.id()) {
                attrs.push_str(", color=gray50, fontcolor=gray50");
            }
        }
        let _ = writeln!(s, "  n{} [{attrs}];", n.id().0);
    }
    for n in graph.nodes() {
        for (port, &i) in n.inputs().iter().enumerate() {
            if *graph.node(i).op() == Op::Parameter {
                continue;
            }
            let style = if report.is_some() && !edge_is_transparent(n, port, loss) {
                " [style=dashed]"
            } else {
                ""
            };
            let _ = writeln!(s, "  n{} -> n{}{style};", i.0, n.id().0);
        }
    }
    s.push_str("}\n");
    s
}
