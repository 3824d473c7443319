//! Numerical check of a direct-path verdict.
//!
//! Every convolution and linear weight downstream of the node (outside the
//! task head) is zeroed, so residual functions vanish and only the
//! transparent routing remains. After a real backward pass in double
//! precision, the gradient at the node must equal the gradient that enters
//! the backbone from the task head, carried back by hand-written adjoints
//! of the routing ops alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::BPReport;
use crate::error::Result;
use crate::graph::{Graph, NodeId, Op, Region};
use crate::ops::PoolParams;
use crate::tensor::{Scalar, Tensor};

/// Agreement bound, relative to `max(1, |engine grad|)`.
pub const WITNESS_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum WitnessCheck {
    Agree { max_rel_err: f64, grad_abs_max: f64 },
    Disagree { max_rel_err: f64 },
    NotApplicable(String),
}

impl WitnessCheck {
    pub fn passed(&self) -> bool {
        matches!(self, WitnessCheck::Agree { .. })
    }
}

pub fn verify_direct_bp_numerical<T: Scalar>(
    graph: &Graph<T>,
    report: &BPReport,
    node: NodeId,
    seed: u64,
) -> Result<WitnessCheck> {
    let loss = report.loss;
    let target = graph.node(node);
    if !report.is_direct(node) {
        return Ok(WitnessCheck::NotApplicable(format!("`{}` has no transparent path to the loss", target.name())));
    }
    if *target.op() == Op::Parameter {
        return Ok(WitnessCheck::NotApplicable(format!("`{}` is a parameter", target.name())));
    }
    let in_task = |g: &Graph<f64>, id: NodeId| id == loss || g.node(id).tag().region == Region::TaskHead;

    let mut g: Graph<f64> = graph.cast();
    if in_task(&g, node) {
        return Ok(WitnessCheck::NotApplicable(format!("`{}` is part of the task head", target.name())));
    }
    let consumers = g.consumers();
    let mut below = vec![false; g.len()];
    below[node.0] = true;
    for i in node.0..g.len() {
        if g.node(NodeId(i)).inputs().iter().any(|x| below[x.0]) {
            below[i] = true;
        }
    }

    feed_random_inputs(&mut g, seed)?;
    let weights: Vec<NodeId> = (node.0 + 1..g.len())
        .map(NodeId)
        .filter(|&i| below[i.0] && !in_task(&g, i))
        .filter(|&i| matches!(g.node(i).op(), Op::Conv2d(_) | Op::Linear))
        .map(|i| g.node(i).inputs()[1])
        .collect();
    for w in weights {
        g.param_mut(w).fill(0.0);
    }
    g.set_requires_grad(node, true);
    g.forward()?;
    g.backward(loss)?;

    let mut oracle: Vec<Option<Vec<f64>>> = vec![None; g.len()];
    for v in (node.0..g.len()).rev().map(NodeId) {
        if !below[v.0] || in_task(&g, v) {
            continue;
        }
        let cons = &consumers[v.0];
        let task = cons.iter().filter(|&&c| in_task(&g, c)).count();
        let numel = g.node(v).shape().iter().product::<usize>();
        let numel = g.value(v).map_or(numel, |t| t.numel());
        let grad = if task > 0 {
            if task != cons.len() {
                return Ok(WitnessCheck::NotApplicable(format!(
                    "`{}` feeds the task head and the backbone at once",
                    g.node(v).name()
                )));
            }
            g.grad(v).map_or_else(|| vec![0.0; numel], |t| t.data().to_vec())
        } else {
            let mut acc = vec![0.0; numel];
            for &c in cons {
                let Some(gc) = oracle[c.0].as_ref() else { continue };
                for (port, _) in g.node(c).inputs().iter().enumerate().filter(|(_, &i)| i == v) {
                    for (a, b) in acc.iter_mut().zip(adjoint(&g, c, port, gc)) {
                        *a += b;
                    }
                }
            }
            acc
        };
        oracle[v.0] = Some(grad);
    }

    let want = oracle[node.0].take().unwrap_or_default();
    let got = g.grad(node).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; want.len()]);
    let mut max_rel_err = 0.0f64;
    let mut grad_abs_max = 0.0f64;
    for (&a, &b) in want.iter().zip(&got) {
        let err = (a - b).abs() / b.abs().max(1.0);
        max_rel_err = if err.is_nan() { f64::INFINITY } else { max_rel_err.max(err) };
        grad_abs_max = grad_abs_max.max(b.abs());
    }
    if want.len() == got.len() && max_rel_err <= WITNESS_TOL {
        Ok(WitnessCheck::Agree { max_rel_err, grad_abs_max })
    } else {
        Ok(WitnessCheck::Disagree { max_rel_err })
    }
}

/// Standard normal features; class labels for inputs read by a loss.
fn feed_random_inputs(g: &mut Graph<f64>, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consumers = g.consumers();
    let inputs: Vec<NodeId> = g.inputs().collect();
    for id in inputs {
        let shape = g.node(id).shape().to_vec();
        let classes = consumers[id.0]
            .iter()
            .map(|&c| g.node(c))
            .find(|c| *c.op() == Op::SoftmaxXent && c.inputs()[1] == id)
            .map(|c| g.node(c.inputs()[0]).shape()[1]);
        let n: usize = shape.iter().product();
        let data = match classes {
            Some(k) => (0..n).map(|_| rng.random_range(0..k) as f64).collect(),
            None => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        g.set_value(id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

fn dims(g: &Graph<f64>, id: NodeId) -> [usize; 4] {
    let s = g.value(id).expect("evaluated").shape();
    [s[0], s[1], s[2], s[3]]
}

/// Gradient sent by `c` to its input `port`, given the gradient `gc` at
/// `c`'s output. Ops outside the routing set only pass a zero gradient
/// exactly; anything else comes back as NaN so the comparison fails.
fn adjoint(g: &Graph<f64>, c: NodeId, port: usize, gc: &[f64]) -> Vec<f64> {
    let node = g.node(c);
    let x = node.inputs()[port];
    let numel = g.value(x).expect("evaluated").numel();
    let zero_or_poison = |ok: bool| vec![if ok { 0.0 } else { f64::NAN }; numel];
    match node.op() {
        Op::Add { .. } => gc.to_vec(),
        Op::Flatten => gc.to_vec(),
        Op::Sum => vec![gc[0]; numel],
        Op::Concat => {
            let [n, c_total, h, w] = dims(g, c);
            let offset: usize = node.inputs()[..port].iter().map(|&i| dims(g, i)[1]).sum();
            let ci = dims(g, x)[1];
            let mut out = Vec::with_capacity(numel);
            for b in 0..n {
                let start = (b * c_total + offset) * h * w;
                out.extend_from_slice(&gc[start..start + ci * h * w]);
            }
            out
        }
        Op::ChannelReduce { k } => {
            let [n, c_in, h, w] = dims(g, x);
            let mut out = vec![0.0; numel];
            for b in 0..n {
                for ch in 0..c_in {
                    let src = ((b * (c_in / k) + ch / k) * h) * w;
                    let dst = ((b * c_in + ch) * h) * w;
                    out[dst..dst + h * w].copy_from_slice(&gc[src..src + h * w]);
                }
            }
            out
        }
        Op::UpsampleNearest { factor } => {
            let [n, ch, h, w] = dims(g, x);
            let (ho, wo) = (h * factor, w * factor);
            let mut out = vec![0.0; numel];
            for p in 0..n * ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[p * h * w + (oy / factor) * w + ox / factor] += gc[p * ho * wo + oy * wo + ox];
                    }
                }
            }
            out
        }
        Op::GlobalAvgPool => {
            let [_, _, h, w] = dims(g, x);
            (0..numel).map(|i| gc[i / (h * w)] / (h * w) as f64).collect()
        }
        Op::MaxPool(p) => pool_adjoint(g.value(x).expect("evaluated"), p, gc, true),
        Op::AvgPool(p) => pool_adjoint(g.value(x).expect("evaluated"), p, gc, false),
        Op::ChannelMul => {
            let [_, _, h, w] = dims(g, node.inputs()[0]);
            let xv = g.value(node.inputs()[0]).expect("evaluated").data();
            let gate = g.value(node.inputs()[1]).expect("evaluated").data();
            if port == 0 {
                (0..numel).map(|i| gc[i] * gate[i / (h * w)]).collect()
            } else {
                (0..numel)
                    .map(|p| (0..h * w).map(|j| xv[p * h * w + j] * gc[p * h * w + j]).sum())
                    .collect()
            }
        }
        Op::Conv2d(_) | Op::Linear => {
            let w = g.value(node.inputs()[1]).expect("parameter");
            zero_or_poison(port == 0 && w.data().iter().all(|&v| v == 0.0))
        }
        _ => zero_or_poison(gc.iter().all(|&v| v == 0.0)),
    }
}

/// Window scan over valid (unpadded) positions; max routes to the first
/// maximum in scan order.
fn pool_adjoint(x: &Tensor<f64>, p: &PoolParams, gc: &[f64], max: bool) -> Vec<f64> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h + 2 * p.padding - p.kernel) / p.stride + 1;
    let wo = (w + 2 * p.padding - p.kernel) / p.stride + 1;
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for plane in 0..n * ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gc[(plane * ho + oy) * wo + ox];
                let mut window = Vec::new();
                for ki in 0..p.kernel {
                    for kj in 0..p.kernel {
                        let iy = (oy * p.stride + ki) as isize - p.padding as isize;
                        let ix = (ox * p.stride + kj) as isize - p.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            window.push(plane * h * w + iy as usize * w + ix as usize);
                        }
                    }
                }
                if max {
                    let best = window.iter().copied().fold(None, |b: Option<usize>, i| match b {
                        Some(j) if xv[j] >= xv[i] => Some(j),
                        _ => Some(i),
                    });
                    if let Some(i) = best {
                        out[i] += gv;
                    }
                } else {
                    for i in window {
                        out[i] += gv / (p.kernel * p.kernel) as f64;
                    }
                }
            }
        }
    }
    out
}
