//! Training and evaluation loop.
//!
//! Metrics reported per epoch are running averages over the epoch's
//! mini-batches in training mode (batch statistics in batch norm), so they
//! differ slightly from [`evaluate`], which uses the running statistics.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::fishnet::{build, FishNetConfig, Model};
use crate::graph::Graph;
use crate::optim::{Sgd, StepDecay};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecipe {
    pub lr: f64,
    /// Multiply the rate by `factor` every `step_epochs` epochs.
    pub step_epochs: usize,
    pub factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip: bool,
    /// Random crop after zero padding by this many pixels; 0 disables it.
    pub crop_pad: usize,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            lr: 0.01,
            step_epochs: 15,
            factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            flip: false,
            crop_pad: 0,
            seed: 0,
            warmup_epochs: 0,
            clip_norm: None,
        }
    }
}

impl TrainRecipe {
    /// The ImageNet recipe: lr 0.1, ÷10 every 30 epochs, flip and crop.
    pub fn paper() -> Self {
        Self {
            lr: 0.1,
            step_epochs: 30,
            epochs: 100,
            batch_size: 256,
            flip: true,
            crop_pad: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("training recipe: {m}")));
        // a zero rate is allowed: it leaves every parameter untouched
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return bad(format!("decay factor must lie in (0, 1), got {}", self.factor));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be >= 0".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be > 0".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.lr,
            step_epochs: self.step_epochs,
            factor: self.factor,
            warmup_epochs: self.warmup_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl EpochMetrics {
    pub const TSV_HEADER: &'static str = "epoch\tlr\tloss\tacc";
}

/// One TSV line: `epoch<TAB>lr<TAB>loss<TAB>acc`.
impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6}\t{:.4}", self.epoch, self.lr, self.loss, self.acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub acc: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub sgd: Sgd<f32>,
    pub norm: Normalization,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, with_momentum: bool) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.norm, with_momentum.then_some(&self.sgd))
    }
}

fn check_compatible(config: &FishNetConfig, data: &Dataset) -> Result<()> {
    if data.shape != config.input_shape {
        return Err(Error::Config {
            stage: None,
            message: format!(
                "dataset images are {:?} but the network expects input_shape {:?}",
                data.shape, config.input_shape
            ),
        });
    }
    if data.num_classes > config.num_classes {
        return Err(Error::Config {
            stage: None,
            message: format!(
                "dataset has {} classes but the network predicts {}",
                data.num_classes, config.num_classes
            ),
        });
    }
    if data.is_empty() {
        return Err(Error::Format("dataset is empty".into()));
    }
    Ok(())
}

/// Train a freshly initialized network. `on_epoch` sees each epoch's
/// metrics as soon as they are available.
pub fn train(
    config: &FishNetConfig,
    data: &Dataset,
    recipe: &TrainRecipe,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    recipe.validate()?;
    check_compatible(config, data)?;
    let model = build::<f32>(config, recipe.batch_size, recipe.seed)?;
    let norm = data.channel_stats();
    let sgd = Sgd::new(recipe.momentum, recipe.weight_decay);
    let mut outcome = TrainOutcome {
        model,
        sgd,
        norm,
        metrics: Vec::with_capacity(recipe.epochs),
    };
    resume(&mut outcome, data, recipe, 0, &mut on_epoch)?;
    Ok(outcome)
}

/// Continue training `outcome` from epoch `start`.
pub fn resume(
    outcome: &mut TrainOutcome,
    data: &Dataset,
    recipe: &TrainRecipe,
    start: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<()> {
    recipe.validate()?;
    check_compatible(&outcome.model.config, data)?;
    let schedule = recipe.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    // the stream position depends only on the epoch count
    for _ in 0..start {
        order.shuffle(&mut rng);
        augment_draws(&mut rng, data.len(), recipe);
    }
    let model = &mut outcome.model;
    model.graph.set_training(true);
    for epoch in start..recipe.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let aug = augment_draws(&mut rng, data.len(), recipe);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(recipe.batch_size) {
            let views: Vec<View> = batch.iter().map(|&i| aug[i]).collect();
            let (loss, hits) = step_batch(model, &outcome.norm, data, batch, &views, recipe, &mut outcome.sgd, lr)?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
        };
        on_epoch(&m);
        outcome.metrics.push(m);
    }
    Ok(())
}

/// Per-example flip and crop offset.
#[derive(Clone, Copy, Debug, Default)]
struct View {
    flip: bool,
    dy: isize,
    dx: isize,
}

fn augment_draws(rng: &mut ChaCha8Rng, n: usize, recipe: &TrainRecipe) -> Vec<View> {
    if !recipe.flip && recipe.crop_pad == 0 {
        return vec![View::default(); n];
    }
    let pad = recipe.crop_pad as i64;
    (0..n)
        .map(|_| View {
            flip: recipe.flip && rng.random_bool(0.5),
            dy: if pad > 0 { rng.random_range(-pad..=pad) as isize } else { 0 },
            dx: if pad > 0 { rng.random_range(-pad..=pad) as isize } else { 0 },
        })
        .collect()
}

/// Normalized batch tensor; views shift the image (zero fill) and mirror it.
fn batch_tensor(norm: &Normalization, data: &Dataset, idx: &[usize], views: &[View]) -> Tensor<f32> {
    let [c, h, w] = data.shape;
    let per = c * h * w;
    let mut out = vec![0.0f32; idx.len() * per];
    let mut tmp = vec![0.0f32; per];
    for (b, &i) in idx.iter().enumerate() {
        let dst = &mut out[b * per..(b + 1) * per];
        let v = views.get(b).copied().unwrap_or_default();
        if v.dx == 0 && v.dy == 0 && !v.flip {
            norm.apply(data.image(i), dst);
            continue;
        }
        norm.apply(data.image(i), &mut tmp);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + v.dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if v.flip { w - 1 - x } else { x };
                    let sx = xx as isize + v.dx;
                    if sx >= 0 && sx < w as isize {
                        dst[(ch * h + y) * w + x] = tmp[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(&[idx.len(), c, h, w], out).expect("batch shape")
}

fn feed(model: &mut Model<f32>, norm: &Normalization, data: &Dataset, idx: &[usize], views: &[View]) -> Result<()> {
    let x = batch_tensor(norm, data, idx, views);
    let labels: Vec<f32> = idx.iter().map(|&i| data.labels[i] as f32).collect();
    model.graph.set_value(model.input, x)?;
    model.graph.set_value(model.labels, Tensor::new(&[idx.len()], labels)?)?;
    Ok(())
}

fn non_finite(graph: &Graph<f32>) -> Error {
    match graph.first_non_finite() {
        Some(id) => {
            let n = graph.node(id);
            Error::NonFinite {
                node: n.name().to_string(),
                kind: n.kind().to_string(),
            }
        }
        None => Error::NonFinite {
            node: "<gradient>".into(),
            kind: "backward".into(),
        },
    }
}

/// Number of rows of `logits` whose first maximum is the label.
fn hits(logits: &Tensor<f32>, labels: &[u32], idx: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(idx)
        .filter(|(row, &i)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best as u32 == labels[i]
        })
        .count()
}

#[allow(clippy::too_many_arguments)]
fn step_batch(
    model: &mut Model<f32>,
    norm: &Normalization,
    data: &Dataset,
    idx: &[usize],
    views: &[View],
    recipe: &TrainRecipe,
    sgd: &mut Sgd<f32>,
    lr: f64,
) -> Result<(f64, usize)> {
    feed(model, norm, data, idx, views)?;
    model.graph.forward()?;
    let loss = model.graph.value(model.loss).expect("evaluated").data()[0] as f64;
    if !loss.is_finite() {
        return Err(non_finite(&model.graph));
    }
    let correct = hits(model.graph.value(model.logits).expect("evaluated"), &data.labels, idx);
    model.graph.backward(model.loss)?;
    if let Some(max) = recipe.clip_norm {
        if !Sgd::clip_grad_norm(&mut model.graph, max).is_finite() {
            return Err(non_finite(&model.graph));
        }
    }
    sgd.step(&mut model.graph, lr);
    Ok((loss, correct))
}

/// Top-1 accuracy and mean loss with batch norm in inference mode.
pub fn evaluate(model: &mut Model<f32>, norm: &Normalization, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    check_compatible(&model.config, data)?;
    let was_training = model.graph.is_training();
    model.graph.set_training(false);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let result = (|| {
        for batch in idx.chunks(batch_size.max(1)) {
            feed(model, norm, data, batch, &[])?;
            model.graph.forward_to(model.loss)?;
            let loss = model.graph.value(model.loss).expect("evaluated").data()[0] as f64;
            if !loss.is_finite() {
                return Err(non_finite(&model.graph));
            }
            loss_sum += loss * batch.len() as f64;
            correct += hits(model.graph.value(model.logits).expect("evaluated"), &data.labels, batch);
        }
        Ok(())
    })();
    model.graph.set_training(was_training);
    result?;
    Ok(EvalMetrics {
        loss: loss_sum / data.len() as f64,
        acc: correct as f64 / data.len() as f64,
    })
}

/// Forward a batch of raw `[0, 1]` images in inference mode and return the
/// logits.
pub fn predict(model: &mut Model<f32>, norm: &Normalization, data: &Dataset, idx: &[usize]) -> Result<Tensor<f32>> {
    let was_training = model.graph.is_training();
    model.graph.set_training(false);
    let r = feed(model, norm, data, idx, &[]).and_then(|_| model.graph.forward_to(model.logits));
    model.graph.set_training(was_training);
    r?;
    Ok(model.graph.value(model.logits).expect("evaluated").clone())
}
