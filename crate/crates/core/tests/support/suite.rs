//! One finite-difference case per op kind, parameterised by a seed that
//! also picks the shapes and attributes.

use fishnet::ops::{Conv2dParams, PoolParams};
use fishnet::{Graph, Tensor};
use rand::Rng;

use super::{grad_check, rand_separated, randn, rng, GradCheck};

pub const SHAPES_PER_OP: u64 = 20;

pub type Case = fn(u64) -> GradCheck;

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d as Case),
        ("maxpool", maxpool),
        ("avgpool", avgpool),
        ("upsample_nearest", upsample),
        ("concat", concat),
        ("channel_reduce", channel_reduce),
        ("add", add),
        ("channel_mul", channel_mul),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("batchnorm_train", batchnorm_train),
        ("batchnorm_eval", batchnorm_eval),
        ("linear", linear),
        ("global_avg_pool", global_avg_pool),
        ("flatten", flatten),
        ("sum", sum),
        ("softmax_xent", softmax_xent),
    ]
}

/// Worst relative error over `SHAPES_PER_OP` seeds, and the number of
/// scalar derivatives compared.
pub fn run(case: Case) -> (f64, usize) {
    (0..SHAPES_PER_OP).fold((0.0, 0), |(worst, n), seed| {
        let r = case(seed * 7919 + 17);
        (worst.max(r.max_rel_err), n + r.checked)
    })
}

fn conv2d(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let groups = r.random_range(1..=2);
    let cin = groups * r.random_range(1..=3);
    let cout = groups * r.random_range(1..=2);
    let k = r.random_range(1..=3);
    let p = Conv2dParams {
        stride: r.random_range(1..=2),
        padding: r.random_range(0..=2),
        dilation: r.random_range(1..=2),
        groups,
    };
    let span = p.dilation * (k - 1) + 1;
    let h = span + r.random_range(0..=3);
    let w = span + r.random_range(0..=3);
    let n = r.random_range(1..=2);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[n, cin, h, w]).unwrap();
    g.set_value(x, randn(&[n, cin, h, w], &mut r)).unwrap();
    let wt = g.parameter("w", randn(&[cout, cin / groups, k, k], &mut r)).unwrap();
    let y = g.conv2d("y", x, wt, p).unwrap();
    grad_check(&mut g, &[x, wt], y, seed)
}

fn pool(seed: u64, max: bool) -> GradCheck {
    let mut r = rng(seed);
    let kernel = r.random_range(2..=3);
    let padding = if kernel == 3 { r.random_range(0..=1) } else { 0 };
    let p = PoolParams {
        kernel,
        stride: 2,
        padding,
    };
    let shape = [
        r.random_range(1..=2),
        r.random_range(1..=3),
        kernel + r.random_range(0..=5),
        kernel + r.random_range(0..=5),
    ];
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    // Well separated values keep every window's argmax stable under ±h.
    g.set_value(x, rand_separated(&shape, &mut r, 1e-3)).unwrap();
    let y = if max {
        g.maxpool("y", x, p).unwrap()
    } else {
        g.avgpool("y", x, p).unwrap()
    };
    grad_check(&mut g, &[x], y, seed)
}

fn maxpool(seed: u64) -> GradCheck {
    pool(seed, true)
}

fn avgpool(seed: u64) -> GradCheck {
    pool(seed, false)
}

fn small4(r: &mut impl Rng) -> [usize; 4] {
    [
        r.random_range(1..=2),
        r.random_range(1..=4),
        r.random_range(1..=5),
        r.random_range(1..=5),
    ]
}

fn upsample(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let factor = r.random_range(1..=3);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.upsample_nearest("y", x, factor).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn concat(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let base = small4(&mut r);
    let parts = r.random_range(1..=3);
    let mut g = Graph::<f64>::new();
    let mut xs = Vec::new();
    for i in 0..parts {
        let mut s = base;
        s[1] = r.random_range(1..=3);
        let x = g.input(format!("x{i}"), &s).unwrap();
        g.set_value(x, randn(&s, &mut r)).unwrap();
        xs.push(x);
    }
    let y = g.concat("y", &xs).unwrap();
    grad_check(&mut g, &xs, y, seed)
}

fn channel_reduce(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let k = r.random_range(1..=3);
    let mut shape = small4(&mut r);
    shape[1] *= k;
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.channel_reduce("y", x, k).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn add(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let a = g.input("a", &shape).unwrap();
    let b = g.input("b", &shape).unwrap();
    let c = g.input("c", &shape).unwrap();
    for id in [a, b, c] {
        g.set_value(id, randn(&shape, &mut r)).unwrap();
    }
    let s = g.residual_add("s", a, b).unwrap();
    let y = g.add("y", &[s, c, a]).unwrap();
    grad_check(&mut g, &[a, b, c], y, seed)
}

fn channel_mul(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let gate_shape = [shape[0], shape[1], 1, 1];
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    let gate = g.input("gate", &gate_shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    g.set_value(gate, randn(&gate_shape, &mut r)).unwrap();
    let y = g.channel_mul("y", x, gate).unwrap();
    grad_check(&mut g, &[x, gate], y, seed)
}

fn relu(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, rand_separated(&shape, &mut r, 1e-3)).unwrap();
    let y = g.relu("y", x).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn sigmoid(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.sigmoid("y", x).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn batchnorm(seed: u64, training: bool) -> GradCheck {
    let mut r = rng(seed);
    let shape: Vec<usize> = if r.random_bool(0.25) {
        vec![r.random_range(2..=6), r.random_range(1..=4)]
    } else {
        let mut s = small4(&mut r).to_vec();
        s[0] = r.random_range(2..=3);
        s
    };
    let c = shape[1];
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let gamma = g.parameter("gamma", randn(&[c], &mut r)).unwrap();
    let beta = g.parameter("beta", randn(&[c], &mut r)).unwrap();
    let y = g.batchnorm("y", x, gamma, beta).unwrap();
    if !training {
        let stats = g.running_stats_mut(y).unwrap();
        for (m, v) in stats.mean.iter_mut().zip(stats.var.iter_mut()) {
            *m = r.random_range(-1.0..1.0);
            *v = r.random_range(0.5..2.0);
        }
    }
    g.set_training(training);
    grad_check(&mut g, &[x, gamma, beta], y, seed)
}

fn batchnorm_train(seed: u64) -> GradCheck {
    batchnorm(seed, true)
}

fn batchnorm_eval(seed: u64) -> GradCheck {
    batchnorm(seed, false)
}

fn linear(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=3);
    let fan_in = r.random_range(1..=6);
    let out = r.random_range(1..=5);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[n, fan_in]).unwrap();
    g.set_value(x, randn(&[n, fan_in], &mut r)).unwrap();
    let w = g.parameter("w", randn(&[out, fan_in], &mut r)).unwrap();
    let y = g.linear("y", x, w).unwrap();
    grad_check(&mut g, &[x, w], y, seed)
}

fn global_avg_pool(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.global_avg_pool("y", x).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn flatten(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.flatten("y", x).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn sum(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let shape = small4(&mut r);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &shape).unwrap();
    g.set_value(x, randn(&shape, &mut r)).unwrap();
    let y = g.sum("y", x).unwrap();
    grad_check(&mut g, &[x], y, seed)
}

fn softmax_xent(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=4);
    let classes = r.random_range(2..=10);
    let mut g = Graph::<f64>::new();
    let logits = g.input("logits", &[n, classes]).unwrap();
    g.set_value(logits, randn(&[n, classes], &mut r)).unwrap();
    let labels = g.input("labels", &[n]).unwrap();
    let ys: Vec<f64> = (0..n).map(|_| r.random_range(0..classes) as f64).collect();
    g.set_value(labels, Tensor::new(&[n], ys).unwrap()).unwrap();
    let loss = g.softmax_xent("loss", logits, labels).unwrap();
    grad_check(&mut g, &[logits], loss, seed)
}
