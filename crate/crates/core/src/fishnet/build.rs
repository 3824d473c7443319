//! Whole-network assembly from a [`FishNetConfig`].

use super::blocks::{BlockSpec, NetBuilder};
use super::config::{Arch, FishNetConfig, Stem};
use crate::error::Result;
use crate::graph::{Graph, NodeId, Region, Tag};
use crate::ops::Conv2dParams;
use crate::tensor::Scalar;

/// Per-stage features. `tail[s]` is the output of tail stage `s`,
/// `body[s]` the body feature at stage `s`, and `head[s]` the concatenation
/// that opens head stage `s`. Control architectures only fill `tail`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageFeatures {
    pub tail: Vec<NodeId>,
    pub body: Vec<NodeId>,
    pub head: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: FishNetConfig,
    pub graph: Graph<T>,
    pub input: NodeId,
    pub labels: NodeId,
    /// Last backbone feature, the input of the classifier.
    pub feature: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
    pub stages: StageFeatures,
}

/// Build the network described by `config` for a nominal batch size
/// (inputs may be fed with any batch later). Weights are drawn from a
/// stream seeded by `seed`.
pub fn build<T: Scalar>(config: &FishNetConfig, batch: usize, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut graph = Graph::new();
    let [c, h, w] = config.input_shape;
    graph.set_scope(Tag::new(Region::Stem, None));
    let input = graph.input("input", &[batch, c, h, w])?;
    let labels = {
        graph.set_scope(Tag::new(Region::TaskHead, None));
        graph.input("labels", &[batch])?
    };
    let mut nb = NetBuilder::new(&mut graph, seed);
    nb.graph.set_scope(Tag::new(Region::Stem, None));
    let stem = build_stem(&mut nb, config, input)?;
    let (feature, stages) = match config.arch {
        Arch::FishNet => fishnet_backbone(&mut nb, config, stem)?,
        Arch::ResNetControl => resnet_control_backbone(&mut nb, config, stem)?,
        Arch::PlainCnn => plain_backbone(&mut nb, config, stem)?,
    };
    let (logits, loss) = classifier(&mut nb, feature, labels, config.num_classes)?;
    Ok(Model {
        config: config.clone(),
        graph,
        input,
        labels,
        feature,
        logits,
        loss,
        stages,
    })
}

/// Alias of [`build`] for the FishNet architecture family.
pub fn build_fishnet<T: Scalar>(config: &FishNetConfig, batch: usize, seed: u64) -> Result<Model<T>> {
    build(config, batch, seed)
}

fn build_stem<T: Scalar>(nb: &mut NetBuilder<'_, T>, cfg: &FishNetConfig, input: NodeId) -> Result<NodeId> {
    let c0 = cfg.channels[0];
    match cfg.stem {
        Stem::Conv7x7S2 => nb.conv("stem.conv", input, c0, 7, Conv2dParams::new(2, 3, 1, 1)),
        Stem::TwoResidualBlocks => {
            nb.group_width = cfg.group_width;
            let first = BlockSpec {
                stride: 2,
                allow_projection: true,
                ..BlockSpec::identity(c0)
            };
            let x = nb.residual_block("stem.block0", input, first)?;
            nb.residual_block("stem.block1", x, BlockSpec::identity(c0))
        }
    }
}

/// Enter stage `s` of `region`: sets the node tag and the group width.
fn enter<T: Scalar>(nb: &mut NetBuilder<'_, T>, cfg: &FishNetConfig, region: Region, s: usize) {
    nb.graph.set_scope(Tag::new(region, s));
    nb.group_width = cfg.group_width << s;
}

/// Tail stages; returns the per-stage outputs. The first block of stage
/// `s > 0` projects from the previous stage's width.
fn tail<T: Scalar>(nb: &mut NetBuilder<'_, T>, cfg: &FishNetConfig, stem: NodeId) -> Result<Vec<NodeId>> {
    let mut x = stem;
    let mut outs = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        enter(nb, cfg, Region::Tail, s);
        if s > 0 {
            x = nb.downsample(&format!("tail.s{}.down", s - 1), x, cfg.downsample)?;
        }
        let c = cfg.channels[s];
        for b in 0..cfg.tail_blocks[s] {
            let spec = BlockSpec {
                allow_projection: true,
                ..BlockSpec::identity(c)
            };
            x = nb.residual_block(&format!("tail.s{s}.block{b}"), x, spec)?;
        }
        outs.push(x);
    }
    Ok(outs)
}

fn fishnet_backbone<T: Scalar>(
    nb: &mut NetBuilder<'_, T>,
    cfg: &FishNetConfig,
    stem: NodeId,
) -> Result<(NodeId, StageFeatures)> {
    let n = cfg.num_stages;
    let last = n - 1;
    let tail = tail(nb, cfg, stem)?;

    enter(nb, cfg, Region::Bridge, last);
    let pooled = nb.graph.global_avg_pool("bridge.pool", tail[last])?;
    let bridge = nb.bridge_se("bridge", tail[last], pooled, cfg.se_reduction)?;

    let mut body = vec![bridge; n];
    for s in (1..n).rev() {
        enter(nb, cfg, Region::Body, s);
        let ur = nb.ur_block(
            &format!("body.s{s}"),
            body[s],
            tail[s],
            cfg.reduction_k[s],
            cfg.body_dilation,
            cfg.body_blocks[s] - 1,
        )?;
        body[s - 1] = ur.out;
    }
    enter(nb, cfg, Region::Body, 0);
    let c0 = nb.channels(body[0]);
    for b in 0..cfg.body_blocks[0] {
        let spec = BlockSpec::identity(c0).dilation(cfg.body_dilation);
        body[0] = nb.residual_block(&format!("body.s0.block{b}"), body[0], spec)?;
    }

    let mut head = Vec::with_capacity(n);
    let mut h = body[0];
    for s in 0..n {
        enter(nb, cfg, Region::Head, s);
        // stage 0 joins the tail's first stage; later stages join the body
        let source = if s == 0 { tail[0] } else { body[s] };
        let down = (s < last).then_some(cfg.downsample);
        let dr = nb.dr_block(
            &format!("head.s{s}"),
            h,
            source,
            cfg.head_blocks[s],
            down,
        )?;
        head.push(dr.concat);
        h = dr.out;
    }
    Ok((h, StageFeatures { tail, body, head }))
}

fn resnet_control_backbone<T: Scalar>(
    nb: &mut NetBuilder<'_, T>,
    cfg: &FishNetConfig,
    stem: NodeId,
) -> Result<(NodeId, StageFeatures)> {
    let mut x = stem;
    let mut tail = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        enter(nb, cfg, Region::Tail, s);
        let c = cfg.channels[s];
        if s > 0 {
            // x_{0,s+1} = h(x_{L,s}): strided conv, BN, ReLU, no skip
            let t = format!("tail.s{s}.transition");
            let conv = nb.conv(&t, x, c, 1, Conv2dParams::new(2, 0, 1, 1))?;
            let bn = nb.bn(&format!("{t}.bn"), conv)?;
            x = nb.graph.relu(format!("{t}.relu"), bn)?;
        } else if nb.channels(x) != c {
            x = nb.conv("tail.s0.transition", x, c, 1, Conv2dParams::default())?;
        }
        for b in 0..cfg.tail_blocks[s] {
            x = nb.residual_block(&format!("tail.s{s}.block{b}"), x, BlockSpec::identity(c))?;
        }
        tail.push(x);
    }
    Ok((x, StageFeatures {
        tail,
        ..Default::default()
    }))
}

/// `tail_blocks[s]` plain `BN → ReLU → conv3×3` layers per stage with the
/// configured down-sampling between stages.
fn plain_backbone<T: Scalar>(
    nb: &mut NetBuilder<'_, T>,
    cfg: &FishNetConfig,
    stem: NodeId,
) -> Result<(NodeId, StageFeatures)> {
    let mut x = stem;
    let mut tail = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        enter(nb, cfg, Region::Tail, s);
        if s > 0 {
            x = nb.downsample(&format!("tail.s{}.down", s - 1), x, cfg.downsample)?;
        }
        for b in 0..cfg.tail_blocks[s] {
            x = nb.bn_relu_conv(
                &format!("tail.s{s}.layer{b}"),
                1,
                x,
                cfg.channels[s],
                3,
                Conv2dParams::new(1, 1, 1, 1),
            )?;
        }
        tail.push(x);
    }
    Ok((x, StageFeatures {
        tail,
        ..Default::default()
    }))
}

/// `BN → ReLU → conv1×1(classes) → global average pool → flatten →
/// softmax cross-entropy`, tagged as the task head.
fn classifier<T: Scalar>(
    nb: &mut NetBuilder<'_, T>,
    feature: NodeId,
    labels: NodeId,
    classes: usize,
) -> Result<(NodeId, NodeId)> {
    nb.graph.set_scope(Tag::new(Region::TaskHead, None));
    nb.group_width = 0;
    let conv = nb.bn_relu_conv("classifier", 1, feature, classes, 1, Conv2dParams::default())?;
    // small logits at init, so the first loss is close to ln(classes)
    let w = nb.graph.node(conv).inputs()[1];
    let shrink = T::from_f64_lossy(0.1);
    nb.graph.param_mut(w).data_mut().iter_mut().for_each(|v| *v = *v * shrink);
    let pooled = nb.graph.global_avg_pool("classifier.pool", conv)?;
    let logits = nb.graph.flatten("logits", pooled)?;
    let loss = nb.graph.softmax_xent("loss", logits, labels)?;
    nb.graph.set_scope(Tag::default());
    Ok((logits, loss))
}
