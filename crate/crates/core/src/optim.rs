//! Classical momentum SGD with L2 weight decay folded into the gradient,
//! and the step-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId};
use crate::tensor::Scalar;

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p = *p - lr * *v;
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every parameter that received a gradient in the last backward
    /// pass. Momentum buffers are keyed by parameter name.
    pub fn step(&mut self, graph: &mut Graph<T>, lr: f64) {
        let lr = T::from_f64_lossy(lr);
        let momentum = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let params: Vec<NodeId> = graph.parameters().collect();
        for id in params {
            if !graph.node(id).requires_grad() {
                continue;
            }
            let Some(grad) = graph.grad(id).map(|g| g.data().to_vec()) else {
                continue;
            };
            let name = graph.node(id).name().to_string();
            let velocity = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            sgd_step(graph.param_mut(id).data_mut(), &grad, velocity, lr, momentum, wd);
        }
    }

    /// Rescale all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(graph: &mut Graph<T>, max_norm: f64) -> f64 {
        let params: Vec<NodeId> = graph.parameters().collect();
        let norm = params
            .iter()
            .filter_map(|&id| graph.grad(id))
            .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = T::from_f64_lossy(max_norm / norm);
            let clipped: Vec<(NodeId, Vec<T>)> = params
                .iter()
                .filter_map(|&id| graph.grad(id).map(|g| (id, g.data().iter().map(|&v| v * scale).collect())))
                .collect();
            for (id, data) in clipped {
                graph.replace_grad(id, data);
            }
        }
        norm
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<T>) {
        self.velocity.insert(name.into(), v);
    }
}

/// `lr(e) = base · factor^⌊e / step⌋`, with an optional linear warm-up over
/// the first `warmup_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub step_epochs: usize,
    pub factor: f64,
    pub warmup_epochs: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = if self.step_epochs == 0 {
            0
        } else {
            epoch / self.step_epochs
        };
        let lr = self.base * self.factor.powi(decays as i32);
        if epoch < self.warmup_epochs {
            lr * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // hand recurrence: v1 = 0.5, p1 = 1 - 0.05 = 0.95
        //                  v2 = 0.9*0.5 + 0.5 = 0.95, p2 = 0.95 - 0.095 = 0.855
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-15);
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 0.95).abs() < 1e-15);
        assert!((p[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let (lr, wd) = (0.1, 1e-4);
        let mut p = [2.0f64];
        for step in 1..=5 {
            let mut v = [0.0];
            sgd_step(&mut p, &[0.0], &mut v, lr, 0.0, wd);
            let expect = 2.0 * (1.0f64 - lr * wd).powi(step);
            assert!((p[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_closed_form() {
        let s = StepDecay {
            base: 0.1,
            step_epochs: 30,
            factor: 0.1,
            warmup_epochs: 0,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(29), 0.1);
        assert_eq!(s.lr_at(30), 0.1 * 0.1);
        assert_eq!(s.lr_at(95), 0.1 * 0.1f64.powi(3));
    }
}
