//! Fully connected layer and classification loss.

use crate::tensor::{Scalar, Tensor};

/// `y = x·Wᵀ` for `x: N×in` (trailing dims flattened) and `W: out×in`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let fan_in = x.numel() / n;
    let out_f = w.shape()[0];
    let mut out = Tensor::zeros(&[n, out_f]);
    T::gemm(
        n,
        fan_in,
        out_f,
        T::one(),
        x.data(),
        fan_in as isize,
        1,
        w.data(),
        1,
        fan_in as isize,
        T::zero(),
        out.data_mut(),
        out_f as isize,
        1,
    );
    out
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let fan_in = x.numel() / n;
    let out_f = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(
        n,
        out_f,
        fan_in,
        T::one(),
        grad_out.data(),
        out_f as isize,
        1,
        w.data(),
        fan_in as isize,
        1,
        T::zero(),
        dx.data_mut(),
        fan_in as isize,
        1,
    );
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        out_f,
        n,
        fan_in,
        T::one(),
        grad_out.data(),
        1,
        out_f as isize,
        x.data(),
        fan_in as isize,
        1,
        T::zero(),
        dw.data_mut(),
        fan_in as isize,
        1,
    );
    (dx, dw)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// softmax probabilities (kept for the backward pass).
pub fn softmax_xent_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Vec<T>) {
    let n = logits.shape()[0];
    let classes = logits.numel() / n;
    let mut probs = vec![T::zero(); logits.numel()];
    let mut total = T::zero();
    for (b, row) in logits.data().chunks_exact(classes).enumerate() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (p, &v) in probs[b * classes..][..classes].iter_mut().zip(row) {
            *p = (v - max).exp();
            z = z + *p;
        }
        for p in &mut probs[b * classes..][..classes] {
            *p = *p / z;
        }
        // -log softmax = log z - (v - max)
        total = total + z.ln() - (row[labels[b]] - max);
    }
    (total / T::from_usize(n).unwrap(), probs)
}

pub fn softmax_xent_backward<T: Scalar>(
    shape: &[usize],
    probs: &[T],
    labels: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let n = shape[0];
    let classes = probs.len() / n;
    let scale = grad_loss / T::from_usize(n).unwrap();
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (b, &label) in labels.iter().enumerate() {
        let i = b * classes + label;
        d[i] = d[i] - scale;
    }
    Tensor::new(shape, d).expect("logit shape")
}
