use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, match_anchors, ImageTargets};
use super::ModelGraph;
use crate::autodiff::Tape;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::geometry::BBox;
use crate::metrics::{evaluate, EvalConfig};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Regression coefficient of the GIoU loss.
    pub m: f64,
    pub match_threshold: f64,
    pub neg_ratio: usize,
    /// Global gradient-norm clip, applied per batch.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![30, 36],
            lr_decay: 0.1,
            m: 50.0,
            match_threshold: 0.5,
            neg_ratio: 3,
            grad_clip: Some(100.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the positive-normalised loss.
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// mAP@0.5 on the evaluation set, when one was given.
    pub final_map: Option<f64>,
}

/// SGD with classical momentum and L2 weight decay:
/// `v = mu*v + g + wd*w; w -= lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if w.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape("Sgd::step", w.shape(), g.shape()));
            }
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Evaluate `f` on every item (in parallel when enabled) and sum the
/// returned statistics and gradients in item order.
pub fn batch_gradients<T, F>(items: &[T], f: F) -> Result<(Vec<f64>, Vec<Tensor>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(Vec<f64>, Vec<Tensor>)> + Send + Sync,
{
    let results = map_ordered(items, f);
    let mut stats: Vec<f64> = Vec::new();
    let mut grads: Vec<Tensor> = Vec::new();
    for r in results {
        let (s, g) = r?;
        if grads.is_empty() {
            stats = s;
            grads = g;
            continue;
        }
        for (a, b) in stats.iter_mut().zip(&s) {
            *a += b;
        }
        for (a, b) in grads.iter_mut().zip(&g) {
            a.axpy(1.0, b)?;
        }
    }
    Ok((stats, grads))
}

/// Forward/backward of one image; returns `[total, cls, reg]` and the
/// per-layer gradients of `scale * (L_c + L_r)`.
pub(crate) fn image_gradient(
    model: &ModelGraph,
    anchors: &[BBox],
    sample: &Sample,
    targets: &ImageTargets,
    scale: f64,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, |_| true);
    let x = tape.constant(sample.image.clone());
    let pass = model.forward(&mut tape, &params, x)?;
    let loss = detection_loss(
        &mut tape,
        pass.logits,
        pass.offsets,
        anchors,
        targets,
        &sample.labels,
        &sample.boxes,
        cfg.m,
        cfg.neg_ratio,
        &model.coder,
    )?;
    let scaled = tape.mul_scalar(loss.total, scale);
    tape.backward(scaled)?;
    let stats = vec![
        tape.value(scaled).data()[0],
        tape.value(loss.classification).data()[0] * scale,
        tape.value(loss.regression).data()[0] * scale,
    ];
    let grads = params
        .iter()
        .zip(&model.layers)
        .map(|(&p, l)| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(l.weight.shape())))
        .collect();
    Ok((stats, grads))
}

pub(crate) fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Train `model` in place on `data` by minibatch SGD.
///
/// Each batch minimises `sum(L_c + L_r) / max(1, positives in batch)`.
/// When the loss or weights become non-finite the weights from the start
/// of the failing epoch are restored and [`Error::NonFinite`] is returned.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig, eval_set: Option<&Dataset>) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let anchors = model.default_boxes();
    let targets: Vec<ImageTargets> = data
        .samples
        .iter()
        .map(|s| match_anchors(&anchors, &s.boxes, cfg.match_threshold))
        .collect();
    let mut rng = rng_for(cfg.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let checkpoint = model.clone();
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let npos: usize = chunk.iter().map(|&i| targets[i].num_positives()).sum();
            let scale = 1.0 / npos.max(1) as f64;
            let m: &ModelGraph = model;
            let (stats, mut grads) = batch_gradients(chunk, |&i| {
                image_gradient(m, &anchors, &data.samples[i], &targets[i], scale, cfg)
            })?;
            if !stats[0].is_finite() || grads.iter().any(|g| !g.is_finite()) {
                *model = checkpoint;
                return Err(Error::NonFinite(format!("training loss diverged in epoch {epoch}")));
            }
            model.mask_gradients(&mut grads)?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.layers.iter_mut().map(|l| &mut l.weight).collect(), &grads)?;
            model.apply_masks()?;
            if !model.weights_finite() {
                *model = checkpoint;
                return Err(Error::NonFinite(format!("weights became non-finite in epoch {epoch}")));
            }
            for (s, v) in sums.iter_mut().zip(&stats) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        logs.push(EpochLog {
            epoch,
            lr: opt.lr,
            loss: sums[0] / n,
            classification: sums[1] / n,
            regression: sums[2] / n,
        });
    }
    let final_map = match eval_set {
        Some(ds) => Some(evaluate(model, ds, &EvalConfig::default())?.map),
        None => None,
    };
    Ok(TrainReport {
        epochs: logs,
        final_map,
    })
}
