//! Per-channel batch normalization over N (and H, W for feature maps).

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (n, c, inner)
}

/// Training mode normalizes with batch statistics and folds them into
/// `running` (unbiased variance, as in common frameworks); eval mode uses
/// `running` as is.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    training: bool,
    eps: f64,
    momentum: f64,
) -> (Tensor<T>, BnCache<T>) {
    let (n, c, inner) = layout(x.shape());
    let count = n * inner;
    let eps = T::from_f64_lossy(eps);
    let xs = x.data();
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    if training {
        let cnt = T::from_usize(count).unwrap();
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * inner..][..inner] {
                    s = s + v;
                }
            }
            let m = s / cnt;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * inner..][..inner] {
                    let d = v - m;
                    sq = sq + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq / cnt;
            inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
        }
        let mom = T::from_f64_lossy(momentum);
        let unbias = if count > 1 {
            cnt / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        for ch in 0..c {
            running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean[ch];
            running.var[ch] = (T::one() - mom) * running.var[ch] + mom * var[ch] * unbias;
        }
    } else {
        for ch in 0..c {
            mean[ch] = running.mean[ch];
            inv_std[ch] = T::one() / (running.var[ch] + eps).sqrt();
        }
    }
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let (gs, bs) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let xh = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                od[i] = gs[ch] * xh + bs[ch];
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_stats: training,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`. With batch statistics the gradient flows
/// through the mean and variance as well.
pub fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, inner) = layout(shape);
    let cnt = T::from_usize(n * inner).unwrap();
    let gs = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] = dbeta[ch] + gs[i];
                dgamma[ch] = dgamma[ch] + gs[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = Tensor::zeros(shape);
    let d = dx.data_mut();
    let gam = gamma.data();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gam[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let mg = dbeta[ch] / cnt;
                let mgx = dgamma[ch] / cnt;
                for i in off..off + inner {
                    d[i] = scale * (gs[i] - mg - cache.xhat[i] * mgx);
                }
            } else {
                for i in off..off + inner {
                    d[i] = scale * gs[i];
                }
            }
        }
    }
    (
        dx,
        Tensor::new(gamma.shape(), dgamma).unwrap(),
        Tensor::new(gamma.shape(), dbeta).unwrap(),
    )
}
