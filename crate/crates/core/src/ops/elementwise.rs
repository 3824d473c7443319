use crate::tensor::{Scalar, Tensor};

pub fn add_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let mut out = xs[0].clone();
    for x in &xs[1..] {
        out.add_assign(x);
    }
    out
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_map(y, grad_out, |s, g| g * s * (T::one() - s))
}

/// `x ⊙ gate` with `gate` of shape N×C×1×1 broadcast over space.
pub fn channel_mul_forward<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x.dims4().expect("NCHW");
    let hw = h * w;
    let mut out = x.clone();
    for (plane, &g) in out.data_mut().chunks_exact_mut(hw).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v = *v * g);
    }
    out
}

pub fn channel_mul_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [_, _, h, w] = x.dims4().expect("NCHW");
    let hw = h * w;
    let dx = channel_mul_forward(grad_out, gate);
    let dgate = x
        .data()
        .chunks_exact(hw)
        .zip(grad_out.data().chunks_exact(hw))
        .map(|(xp, gp)| xp.iter().zip(gp).fold(T::zero(), |a, (&v, &g)| a + v * g))
        .collect();
    (dx, Tensor::new(gate.shape(), dgate).expect("gate shape"))
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
