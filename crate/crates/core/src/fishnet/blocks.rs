//! Block builders. Every block is pre-activation (`BN → ReLU → conv`), so
//! an identity skip carries the block input to the sum untouched.
//!
//! Naming: a residual block with prefix `p` creates `p.branch.conv{1,2,3}`
//! (plus their `.weight` parameters and `p.branch.bn{1,2,3}`), an optional
//! skip projection `p.proj`, and the sum node `p` itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{bottleneck_width, Downsample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{Conv2dParams, PoolParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    /// Permit a 1×1 projection on the skip when the shape changes. Only the
    /// tail (and stem) may project; elsewhere a shape change is an error.
    pub allow_projection: bool,
}

impl BlockSpec {
    pub fn identity(channels: usize) -> Self {
        Self {
            out_channels: channels,
            stride: 1,
            dilation: 1,
            groups: 1,
            allow_projection: false,
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Nodes of an up-sampling refinement block.
#[derive(Clone, Copy, Debug)]
pub struct UrBlock {
    pub transfer: NodeId,
    pub concat: NodeId,
    pub reduce: NodeId,
    pub refined: NodeId,
    pub out: NodeId,
}

/// Nodes of a down-sampling refinement block.
#[derive(Clone, Copy, Debug)]
pub struct DrBlock {
    pub transfer: NodeId,
    pub concat: NodeId,
    pub refined: NodeId,
    pub out: NodeId,
}

/// Appends blocks to a graph, drawing He-normal weights from a seeded
/// stream in construction order.
pub struct NetBuilder<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    /// Channels per group for 3×3 bottleneck convs; 0 defers to
    /// [`BlockSpec::groups`].
    pub group_width: usize,
    rng: ChaCha8Rng,
}

impl<'g, T: Scalar> NetBuilder<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, seed: u64) -> Self {
        Self {
            graph,
            group_width: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn channels(&self, x: NodeId) -> usize {
        self.graph.node(x).shape()[1]
    }

    fn he_normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("valid weight shape")
    }

    /// Bias-free convolution with a fresh `name.weight` parameter.
    pub fn conv(&mut self, name: &str, x: NodeId, cout: usize, kernel: usize, p: Conv2dParams) -> Result<NodeId> {
        let cin = self.channels(x);
        if p.groups == 0 || cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(Error::Attr {
                node: name.to_string(),
                message: format!("groups {} must divide {cin} in and {cout} out channels", p.groups),
            });
        }
        let w = self.he_normal(&[cout, cin / p.groups, kernel, kernel]);
        let w = self.graph.parameter(format!("{name}.weight"), w)?;
        self.graph.conv2d(name, x, w, p)
    }

    /// Affine batch norm with γ = 1, β = 0.
    pub fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels(x);
        let gamma = self.graph.parameter(format!("{name}.gamma"), Tensor::full(&[c], T::one()))?;
        let beta = self.graph.parameter(format!("{name}.beta"), Tensor::zeros(&[c]))?;
        self.graph.batchnorm(name, x, gamma, beta)
    }

    /// `BN → ReLU → conv`, named `{prefix}.bn{i}`, `{prefix}.relu{i}`, `{prefix}.conv{i}`.
    #[allow(clippy::too_many_arguments)]
    pub fn bn_relu_conv(
        &mut self,
        prefix: &str,
        i: usize,
        x: NodeId,
        cout: usize,
        kernel: usize,
        p: Conv2dParams,
    ) -> Result<NodeId> {
        let b = self.bn(&format!("{prefix}.bn{i}"), x)?;
        let r = self.graph.relu(format!("{prefix}.relu{i}"), b)?;
        self.conv(&format!("{prefix}.conv{i}"), r, cout, kernel, p)
    }

    /// Bottleneck residual function: 1×1 → 3×3 (stride, dilation, groups)
    /// → 1×1 with width `out/4`.
    pub fn bottleneck_branch(&mut self, prefix: &str, x: NodeId, spec: BlockSpec) -> Result<NodeId> {
        let width = bottleneck_width(spec.out_channels);
        let groups = match self.group_width {
            0 => spec.groups,
            gw => (width / gw).max(1),
        };
        let a = self.bn_relu_conv(prefix, 1, x, width, 1, Conv2dParams::default())?;
        let mid = Conv2dParams::new(spec.stride, spec.dilation, spec.dilation, groups);
        let b = self.bn_relu_conv(prefix, 2, a, width, 3, mid)?;
        self.bn_relu_conv(prefix, 3, b, spec.out_channels, 1, Conv2dParams::default())
    }

    /// `out = skip(x) + F(x)`. The skip is the identity unless the shape
    /// changes, in which case a 1×1 (strided) projection is inserted if the
    /// spec allows it.
    pub fn residual_block(&mut self, prefix: &str, x: NodeId, spec: BlockSpec) -> Result<NodeId> {
        let cin = self.channels(x);
        let reshape = cin != spec.out_channels || spec.stride != 1;
        if reshape && !spec.allow_projection {
            return Err(Error::Attr {
                node: prefix.to_string(),
                message: format!(
                    "block maps {cin} → {} channels with stride {}; only tail blocks may project their skip",
                    spec.out_channels, spec.stride
                ),
            });
        }
        let branch = self.bottleneck_branch(&format!("{prefix}.branch"), x, spec)?;
        let skip = if reshape {
            self.conv(
                &format!("{prefix}.proj"),
                x,
                spec.out_channels,
                1,
                Conv2dParams::new(spec.stride, 0, 1, 1),
            )?
        } else {
            x
        };
        self.graph.residual_add(prefix, skip, branch)
    }

    /// Channel-preserving residual block carrying a feature between parts.
    pub fn transfer_block(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels(x);
        self.residual_block(prefix, x, BlockSpec::identity(c))
    }

    /// `x̃ = concat(body, T(tail))`, `x̃' = r(x̃) + M(x̃)`, then
    /// `extra` dilated identity blocks, then nearest 2× up-sampling.
    #[allow(clippy::too_many_arguments)]
    pub fn ur_block(
        &mut self,
        prefix: &str,
        body: NodeId,
        tail: NodeId,
        k: usize,
        dilation: usize,
        extra: usize,
    ) -> Result<UrBlock> {
        let transfer = self.transfer_block(&format!("{prefix}.transfer"), tail)?;
        let concat = self.graph.concat(format!("{prefix}.concat"), &[body, transfer])?;
        let c = self.channels(concat);
        if k == 0 || c % k != 0 {
            return Err(Error::Attr {
                node: format!("{prefix}.reduce"),
                message: format!("{c} concatenated channels are not divisible by k = {k}"),
            });
        }
        let reduce = self.graph.channel_reduce(format!("{prefix}.reduce"), concat, k)?;
        let spec = BlockSpec::identity(c / k).dilation(dilation);
        let m = self.bottleneck_branch(&format!("{prefix}.refine.branch"), concat, spec)?;
        let refined = self.graph.residual_add(format!("{prefix}.refine"), reduce, m)?;
        let mut x = refined;
        for b in 0..extra {
            x = self.residual_block(&format!("{prefix}.block{b}"), x, spec)?;
        }
        let out = self.graph.upsample_nearest(format!("{prefix}.up"), x, 2)?;
        Ok(UrBlock {
            transfer,
            concat,
            reduce,
            refined,
            out,
        })
    }

    /// `x̃ = concat(head, T(source))`, `blocks` identity residual blocks,
    /// then down-sampling unless `down` is `None`.
    pub fn dr_block(
        &mut self,
        prefix: &str,
        head: NodeId,
        source: NodeId,
        blocks: usize,
        down: Option<Downsample>,
    ) -> Result<DrBlock> {
        let transfer = self.transfer_block(&format!("{prefix}.transfer"), source)?;
        let concat = self.graph.concat(format!("{prefix}.concat"), &[head, transfer])?;
        let c = self.channels(concat);
        let mut x = concat;
        for b in 0..blocks {
            x = self.residual_block(&format!("{prefix}.block{b}"), x, BlockSpec::identity(c))?;
        }
        let refined = x;
        let out = match down {
            Some(d) => self.downsample(&format!("{prefix}.down"), x, d)?,
            None => x,
        };
        Ok(DrBlock {
            transfer,
            concat,
            refined,
            out,
        })
    }

    /// Halve the resolution.
    pub fn downsample(&mut self, name: &str, x: NodeId, kind: Downsample) -> Result<NodeId> {
        match kind {
            Downsample::Max2 => self.graph.maxpool(name, x, PoolParams::new(2, 2, 0)),
            Downsample::Max3 => self.graph.maxpool(name, x, PoolParams::new(3, 2, 1)),
            Downsample::Avg2 => self.graph.avgpool(name, x, PoolParams::new(2, 2, 0)),
            Downsample::Conv => {
                let c = self.channels(x);
                self.bn_relu_conv(name, 1, x, c, 3, Conv2dParams::new(2, 1, 1, 1))
            }
        }
    }

    /// `x ⊙ gate + F(x)` with `gate = σ(conv1×1(ReLU(conv1×1(pooled))))`.
    /// The gated product is the skip operand of the sum; `F` is a
    /// channel-preserving bottleneck branch.
    pub fn bridge_se(&mut self, prefix: &str, x: NodeId, pooled: NodeId, reduction: usize) -> Result<NodeId> {
        let c = self.channels(x);
        let squeeze = (c / reduction).max(1);
        let g1 = self.conv(&format!("{prefix}.gate.conv1"), pooled, squeeze, 1, Conv2dParams::default())?;
        let g1 = self.graph.relu(format!("{prefix}.gate.relu"), g1)?;
        let g2 = self.conv(&format!("{prefix}.gate.conv2"), g1, c, 1, Conv2dParams::default())?;
        let gate = self.graph.sigmoid(format!("{prefix}.gate.sigmoid"), g2)?;
        let scaled = self.graph.channel_mul(format!("{prefix}.scale"), x, gate)?;
        let branch = self.bottleneck_branch(&format!("{prefix}.branch"), x, BlockSpec::identity(c))?;
        self.graph.residual_add(prefix, scaled, branch)
    }
}
