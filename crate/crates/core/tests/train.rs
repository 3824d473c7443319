use fishnet::checkpoint::Checkpoint;
use fishnet::data::{generate_synthetic, Dataset, SyntheticSpec};
use fishnet::optim::Sgd;
use fishnet::train::{evaluate, resume, train, EpochMetrics, TrainOutcome, TrainRecipe};
use fishnet::{build, Error, FishNetConfig, Op};

fn data(per_class: usize, split: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec { per_class, split, ..Default::default() })
}

fn param_bits(outcome: &TrainOutcome) -> Vec<(String, Vec<u32>)> {
    let g = &outcome.model.graph;
    g.nodes()
        .iter()
        .filter(|n| *n.op() == Op::Parameter)
        .map(|n| (n.name().to_string(), n.value().unwrap().data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_rate_leaves_parameters_unchanged_bitwise() {
    let cfg = FishNetConfig::tiny();
    let recipe = TrainRecipe { lr: 0.0, epochs: 1, batch_size: 16, ..Default::default() };
    let d = data(5, 0);
    let fresh = build::<f32>(&cfg, recipe.batch_size, recipe.seed).unwrap();
    let out = train(&cfg, &d, &recipe, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 1);
    let before: Vec<Vec<u32>> = fresh
        .graph
        .nodes()
        .iter()
        .filter(|n| *n.op() == Op::Parameter)
        .map(|n| n.value().unwrap().data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let after: Vec<Vec<u32>> = param_bits(&out).into_iter().map(|(_, b)| b).collect();
    assert_eq!(before.len(), after.len());
    assert!(before == after);
}

#[test]
fn initial_loss_is_near_ln_10() {
    // batch statistics in batch norm: running statistics are still at their
    // defaults before any training step
    let d = data(20, 0);
    for seed in 0..3 {
        let recipe = TrainRecipe { lr: 0.0, epochs: 1, seed, ..Default::default() };
        let out = train(&FishNetConfig::tiny(), &d, &recipe, |_| {}).unwrap();
        assert!((out.metrics[0].loss - 10f64.ln()).abs() < 0.2, "{}", out.metrics[0].loss);
    }
}

#[test]
fn logged_rates_follow_the_closed_form() {
    let cfg = FishNetConfig::tiny();
    let recipe = TrainRecipe {
        lr: 0.05,
        step_epochs: 2,
        factor: 0.3,
        epochs: 7,
        batch_size: 20,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let out = train(&cfg, &data(2, 0), &recipe, |m| seen.push(*m)).unwrap();
    assert_eq!(seen, out.metrics);
    for (e, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.epoch, e);
        let want = 0.05 * 0.3f64.powi((e / 2) as i32);
        assert_eq!(m.lr.to_bits(), want.to_bits(), "epoch {e}");
    }
}

#[test]
fn metrics_line_is_tab_separated() {
    let m = EpochMetrics { epoch: 3, lr: 0.001, loss: 0.25, acc: 0.5 };
    assert_eq!(m.to_string(), "3\t0.001\t0.250000\t0.5000");
    assert_eq!(EpochMetrics::TSV_HEADER.split('\t').collect::<Vec<_>>(), ["epoch", "lr", "loss", "acc"]);
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let cfg = FishNetConfig::tiny();
    let d = data(6, 0);
    let recipe = TrainRecipe { epochs: 2, batch_size: 16, flip: true, crop_pad: 2, seed: 11, ..Default::default() };
    let a = train(&cfg, &d, &recipe, |_| {}).unwrap();
    let b = train(&cfg, &d, &recipe, |_| {}).unwrap();
    assert!(a.checkpoint(true).to_bytes() == b.checkpoint(true).to_bytes());
    assert_eq!(a.metrics, b.metrics);
    let c = train(&cfg, &d, &TrainRecipe { seed: 12, ..recipe }, |_| {}).unwrap();
    assert!(a.checkpoint(true).to_bytes() != c.checkpoint(true).to_bytes());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = FishNetConfig::tiny();
    let d = data(6, 0);
    let recipe = TrainRecipe { epochs: 4, step_epochs: 2, batch_size: 16, flip: true, crop_pad: 1, ..Default::default() };
    let full = train(&cfg, &d, &recipe, |_| {}).unwrap();

    let half = train(&cfg, &d, &TrainRecipe { epochs: 2, ..recipe.clone() }, |_| {}).unwrap();
    let ck = Checkpoint::from_bytes(&half.checkpoint(true).to_bytes()).unwrap();
    let mut outcome = TrainOutcome {
        model: ck.to_model(recipe.batch_size).unwrap(),
        sgd: ck.restore_sgd(recipe.momentum, recipe.weight_decay),
        norm: ck.normalization().unwrap(),
        metrics: half.metrics.clone(),
    };
    resume(&mut outcome, &d, &recipe, 2, |_| {}).unwrap();
    assert_eq!(outcome.metrics, full.metrics);
    assert!(outcome.checkpoint(true).to_bytes() == full.checkpoint(true).to_bytes());
}

#[test]
fn smoothed_loss_falls_over_the_first_five_epochs() {
    let out = train(&FishNetConfig::tiny(), &data(100, 0), &TrainRecipe { epochs: 5, ..Default::default() }, |_| {}).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn untrained_model_scores_at_chance() {
    let d = data(50, 1);
    for seed in 0..3 {
        let mut model = build::<f32>(&FishNetConfig::tiny(), 50, seed).unwrap();
        let m = evaluate(&mut model, &d.channel_stats(), &d, 50).unwrap();
        assert!((m.acc - 0.1).abs() <= 0.05, "seed {seed}: {}", m.acc);
    }
}

#[test]
fn trained_model_evaluation_and_permuted_labels() {
    let train_set = data(30, 0);
    let test_set = data(30, 1);
    let recipe = TrainRecipe { epochs: 6, step_epochs: 4, ..Default::default() };
    let mut out = train(&FishNetConfig::tiny(), &train_set, &recipe, |_| {}).unwrap();
    let last = *out.metrics.last().unwrap();

    // evaluation uses running batch-norm statistics, training metrics use
    // batch statistics averaged over the epoch, so they agree only roughly
    let on_train = evaluate(&mut out.model, &out.norm, &train_set, 64).unwrap();
    assert!((on_train.acc - last.acc).abs() <= 0.05, "{} vs {}", on_train.acc, last.acc);
    // well above chance, so a drop to chance below is meaningful
    let held_out = evaluate(&mut out.model, &out.norm, &test_set, 64).unwrap();
    assert!(held_out.acc >= 0.6, "{}", held_out.acc);

    // a fixed-point-free permutation of the classes breaks every label
    let mut permuted = test_set.clone();
    permuted.labels.iter_mut().for_each(|l| *l = (*l + 1) % 10);
    let p = evaluate(&mut out.model, &out.norm, &permuted, 64).unwrap();
    assert!(p.acc <= 0.1 + 0.05, "{}", p.acc);

    // shuffling labels across examples leaves about one in ten correct
    let mut shuffled = test_set.clone();
    let perm = [3usize, 7, 0, 9, 4, 1, 8, 2, 6, 5];
    let n = shuffled.len();
    shuffled.labels = (0..n).map(|i| test_set.labels[(i * perm[i % 10] + 7 * i + 1) % n]).collect();
    let s = evaluate(&mut out.model, &out.norm, &shuffled, 64).unwrap();
    let agree = (0..n).filter(|&i| shuffled.labels[i] == test_set.labels[i]).count() as f64 / n as f64;
    assert!((s.acc - agree).abs() <= 0.1, "{} vs {agree}", s.acc);
}

#[test]
fn divergence_names_the_first_non_finite_node() {
    let recipe = TrainRecipe { lr: 1e30, epochs: 3, batch_size: 10, ..Default::default() };
    let err = match train(&FishNetConfig::tiny(), &data(3, 0), &recipe, |_| {}) {
        Err(e) => e,
        Ok(_) => panic!("training at lr 1e30 should diverge"),
    };
    match &err {
        Error::NonFinite { node, kind } => {
            assert!(!node.is_empty() && !kind.is_empty());
            let g = build::<f32>(&FishNetConfig::tiny(), 10, 0).unwrap().graph;
            assert!(g.find(node).is_some(), "{node} is not a node name");
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("non-finite"));
}

#[test]
fn incompatible_dataset_is_rejected() {
    let d = generate_synthetic(&SyntheticSpec { shape: [1, 32, 32], per_class: 1, ..Default::default() });
    assert!(matches!(
        train(&FishNetConfig::tiny(), &d, &TrainRecipe::default(), |_| {}),
        Err(Error::Config { .. })
    ));
}

#[test]
fn invalid_recipes_are_rejected() {
    let d = data(1, 0);
    for bad in [
        TrainRecipe { lr: -0.1, ..Default::default() },
        TrainRecipe { factor: 1.0, ..Default::default() },
        TrainRecipe { factor: 0.0, ..Default::default() },
        TrainRecipe { batch_size: 0, ..Default::default() },
    ] {
        assert!(train(&FishNetConfig::tiny(), &d, &bad, |_| {}).is_err(), "{bad:?}");
    }
}

#[test]
fn clipping_bounds_the_gradient_norm() {
    let mut model = build::<f64>(&FishNetConfig::tiny(), 2, 0).unwrap();
    let d = data(1, 0);
    let x: Vec<f64> = d.pixels[..2 * 3 * 32 * 32].iter().map(|&v| v as f64).collect();
    model.graph.set_value(model.input, fishnet::Tensor::new(&[2, 3, 32, 32], x).unwrap()).unwrap();
    model.graph.set_value(model.labels, fishnet::Tensor::new(&[2], vec![0.0, 1.0]).unwrap()).unwrap();
    model.graph.forward().unwrap();
    model.graph.backward(model.loss).unwrap();
    let before = Sgd::clip_grad_norm(&mut model.graph, 1e-3);
    assert!(before > 1e-3);
    let norm: f64 = model
        .graph
        .parameters()
        .filter_map(|p| model.graph.grad(p))
        .flat_map(|g| g.data().iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt();
    assert!((norm - 1e-3).abs() < 1e-9, "{norm}");
}
