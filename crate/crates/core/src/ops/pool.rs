//! Pooling and resampling: max/avg pooling, nearest up-sampling, global average.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Window positions (input flat offsets within a plane) are scanned
/// row-major; the first maximum wins, so ties go to the earliest element.
/// Padded positions never win. Returns the output and the argmax offset of
/// every output element into the full input buffer.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.dims4().expect("NCHW");
    let ho = p.out_dim(h).expect("validated");
    let wo = p.out_dim(w).expect("validated");
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xs = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..p.kernel {
                    let iy = (oy * p.stride + ki) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel {
                        let ix = (ox * p.stride + kj) as isize - p.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = xs[idx];
                        match best {
                            Some((b, _)) if !(v > b) => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                let (v, idx) = best.expect("window overlaps the input");
                let o = plane * ho * wo + oy * wo + ox;
                od[o] = v;
                argmax[o] = idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// Average pooling; padded positions count as zeros (divisor is always k²).
pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("NCHW");
    let ho = p.out_dim(h).expect("validated");
    let wo = p.out_dim(w).expect("validated");
    let scale = T::one() / T::from_usize(p.kernel * p.kernel).unwrap();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for_each_window(p, h, w, oy, ox, |iy, ix| acc = acc + xs[base + iy * w + ix]);
                od[plane * ho * wo + oy * wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(input_shape: &[usize], p: &PoolParams, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let [_, _, ho, wo] = grad_out.dims4().expect("NCHW");
    let scale = T::one() / T::from_usize(p.kernel * p.kernel).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    let gs = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gs[plane * ho * wo + oy * wo + ox] * scale;
                for_each_window(p, h, w, oy, ox, |iy, ix| {
                    let i = base + iy * w + ix;
                    d[i] = d[i] + g;
                });
            }
        }
    }
    dx
}

fn for_each_window(p: &PoolParams, h: usize, w: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ki in 0..p.kernel {
        let iy = (oy * p.stride + ki) as isize - p.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kj in 0..p.kernel {
            let ix = (ox * p.stride + kj) as isize - p.padding as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("NCHW");
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            let src = &xs[plane * h * w + (oy / factor) * w..][..w];
            let dst = &mut od[plane * ho * wo + oy * wo..][..wo];
            for (ox, o) in dst.iter_mut().enumerate() {
                *o = src[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(input_shape: &[usize], factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(input_shape);
    let gs = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            let src = &gs[plane * ho * wo + oy * wo..][..wo];
            let dst = &mut d[plane * h * w + (oy / factor) * w..][..w];
            for (ox, &g) in src.iter().enumerate() {
                dst[ox / factor] = dst[ox / factor] + g;
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("NCHW");
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(&[n, c, 1, 1], data).expect("shape")
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    dx
}
