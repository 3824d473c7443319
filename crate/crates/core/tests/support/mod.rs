//! Shared test helpers: seeded random tensors, brute-force oracles for the
//! kernels and a central finite-difference gradient checker. Nothing here
//! calls into the kernels it is used to check.
#![allow(dead_code)]

pub mod ledger;
pub mod suite;

use fishnet::fishnet::{Downsample, Stem};
use fishnet::{FishNetConfig, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values whose pairwise gaps and distance from zero exceed `gap`,
/// so a finite-difference step never crosses a ReLU kink or a max-pool tie.
pub fn rand_separated(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n)
        .map(|i| ((i as i64 - (n / 2) as i64) as f64 + 0.5) * gap * 4.0)
        .collect();
    // Fisher-Yates with the test rng keeps the order reproducible.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    Tensor::new(shape, levels).unwrap()
}

// ---- kernel oracles ------------------------------------------------------

/// Direct convolution: one loop per output element and kernel tap.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let wo = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki * dil) as i64 - pad as i64;
                                let ix = (ox * stride + kj * dil) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xi = ((b * cin + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * cin_g + icg) * kh + ki) * kw + kj;
                                acc += xv[xi] * wv[wi];
                            }
                        }
                    }
                    out[((b * cout + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Scan every window; returns pooled values and, for max, the winning flat
/// index (first maximum in row-major order).
pub fn pool_naive(x: &Tensor<f64>, k: usize, stride: usize, pad: usize, max: bool) -> (Tensor<f64>, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut cells = Vec::new();
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride + ki) as i64 - pad as i64;
                        let ix = (ox * stride + kj) as i64 - pad as i64;
                        if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                            let idx = p * h * w + iy as usize * w + ix as usize;
                            cells.push((x.data()[idx], idx));
                        }
                    }
                }
                if max {
                    let mut best = cells[0];
                    for &c in &cells[1..] {
                        if c.0 > best.0 {
                            best = c;
                        }
                    }
                    out.push(best.0);
                    arg.push(best.1);
                } else {
                    out.push(cells.iter().map(|c| c.0).sum::<f64>() / (k * k) as f64);
                }
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out).unwrap(), arg)
}

/// View x as (N, C/k, k, H, W) and sum the k axis.
pub fn channel_reduce_reshape_sum(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = c / k;
    let idx5 = |b: usize, o: usize, j: usize, y: usize, xx: usize| (((b * cout + o) * k + j) * h + y) * w + xx;
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for j in 0..k {
                        s += x.data()[idx5(b, o, j, y, xx)];
                    }
                    out[((b * cout + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out).unwrap()
}

/// Small configs with hand-checkable channel arithmetic: two stages, a
/// residual stem with strided-conv down-sampling, grouped convs, and four
/// stages with average pooling.
pub fn micro_configs() -> Vec<FishNetConfig> {
    let mut a = FishNetConfig::tiny();
    a.num_stages = 2;
    a.input_shape = [3, 16, 16];
    a.channels = vec![8, 16];
    a.tail_blocks = vec![1, 2];
    a.body_blocks = vec![2, 1];
    a.head_blocks = vec![1, 1];
    a.reduction_k = vec![1, 2];
    a.num_classes = 4;

    let mut b = FishNetConfig::tiny();
    b.stem = Stem::TwoResidualBlocks;
    b.downsample = Downsample::Conv;
    b.channels = vec![8, 16, 32];
    b.body_blocks = vec![1, 2, 1];
    b.head_blocks = vec![2, 1, 1];
    b.se_reduction = 4;

    let mut c = FishNetConfig::tiny();
    c.input_shape = [1, 32, 32];
    c.group_width = 1;
    c.downsample = Downsample::Max3;

    let mut d = FishNetConfig::tiny();
    d.num_stages = 4;
    d.channels = vec![8, 8, 16, 16];
    d.tail_blocks = vec![1, 1, 1, 2];
    d.body_blocks = vec![1, 1, 1, 1];
    d.head_blocks = vec![1, 1, 1, 1];
    d.reduction_k = vec![1, 1, 2, 2];
    d.downsample = Downsample::Avg2;
    vec![a, b, c, d]
}

/// Convolution FLOPs worked by hand, two per multiply-add:
/// `(cin, cout, k, stride, pad, hw, flops)` on a `1×cin×hw×hw` input.
pub const CONV_FLOP_CASES: [(usize, usize, usize, usize, usize, usize, u64); 5] = [
    (64, 64, 3, 1, 1, 56, 231_211_008),
    (3, 16, 7, 2, 3, 32, 2 * 16 * 3 * 49 * 16 * 16),
    (16, 4, 1, 1, 0, 8, 2 * 4 * 16 * 64),
    (8, 8, 3, 2, 1, 8, 2 * 8 * 8 * 9 * 16),
    (2, 6, 5, 1, 0, 9, 2 * 6 * 2 * 25 * 25),
];

// ---- finite differences --------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare the engine's gradient of `Σ r ⊙ out` (r random) with respect to
/// every element of every node in `wrt` against central differences
/// `(f(x+h) − f(x−h)) / 2h`. The relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(g: &mut Graph<f64>, wrt: &[NodeId], out: NodeId, seed: u64) -> GradCheck {
    for &id in wrt {
        g.set_requires_grad(id, true);
    }
    g.forward().unwrap();
    let out_shape = g.value(out).unwrap().shape().to_vec();
    let r = randn(&out_shape, &mut rng(seed ^ 0x5eed));
    g.backward_with(out, r.clone()).unwrap();
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|&id| g.grad(id).expect("gradient reached the node").data().to_vec())
        .collect();

    let objective = |g: &mut Graph<f64>| -> f64 {
        g.forward().unwrap();
        g.value(out).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (slot, &id) in wrt.iter().enumerate() {
        let base = g.value(id).unwrap().clone();
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[i] += FD_STEP;
            g.set_value(id, plus).unwrap();
            let fp = objective(g);
            let mut minus = base.clone();
            minus.data_mut()[i] -= FD_STEP;
            g.set_value(id, minus).unwrap();
            let fm = objective(g);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[slot][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
        g.set_value(id, base).unwrap();
    }
    GradCheck {
        max_rel_err: worst,
        checked,
    }
}
