//! Channel-axis plumbing: concatenation and adjacent-channel summation.

use crate::tensor::{Scalar, Tensor};

/// Concatenate along axis 1. All other dims must agree (checked by the graph).
pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let first = xs[0].shape();
    let n = first[0];
    let inner: usize = first[2..].iter().product();
    let total_c: usize = xs.iter().map(|x| x.shape()[1]).sum();
    let mut shape = first.to_vec();
    shape[1] = total_c;
    let mut data = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for x in xs {
            let block = x.shape()[1] * inner;
            data.extend_from_slice(&x.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor::new(&shape, data).expect("concat shape")
}

/// Slice the output gradient back into one gradient per input.
pub fn concat_backward<T: Scalar>(shapes: &[&[usize]], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let n = grad_out.shape()[0];
    let inner: usize = grad_out.shape()[2..].iter().product();
    let total_c = grad_out.shape()[1];
    let gs = grad_out.data();
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let c = shape[1];
            let mut data = Vec::with_capacity(n * c * inner);
            for b in 0..n {
                let start = (b * total_c + offset) * inner;
                data.extend_from_slice(&gs[start..start + c * inner]);
            }
            offset += c;
            Tensor::new(shape, data).expect("concat grad shape")
        })
        .collect()
}

/// Output channel `n` is the sum of input channels `k·n .. k·n + k`.
pub fn channel_reduce_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("NCHW");
    let cout = c / k;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let xs = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let dst = &mut od[(b * cout + oc) * hw..][..hw];
            dst.copy_from_slice(&xs[(b * c + k * oc) * hw..][..hw]);
            for j in 1..k {
                let src = &xs[(b * c + k * oc + j) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
    out
}

pub fn channel_reduce_backward<T: Scalar>(input_shape: &[usize], k: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let cout = c / k;
    let hw = h * w;
    let mut dx = Tensor::zeros(input_shape);
    let gs = grad_out.data();
    let d = dx.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let src = &gs[(b * cout + oc) * hw..][..hw];
            for j in 0..k {
                d[(b * c + k * oc + j) * hw..][..hw].copy_from_slice(src);
            }
        }
    }
    dx
}
