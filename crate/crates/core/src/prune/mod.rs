//! Localization-aware channel pruning: reconstruction + auxiliary joint
//! loss, squared-gradient channel scores, top-K selection and SGD
//! refinement of the retained filter slices.

mod engine;

pub use engine::{prune_model, LayerReport, PruneOutcome, ReportHeader};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of channels removed per layer, in (0, 1).
    pub eta: f64,
    /// Weight of the auxiliary loss in the joint loss; 0 is the
    /// reconstruction-only baseline.
    pub alpha: f64,
    /// Regression coefficient of every GIoU loss.
    pub m: f64,
    /// Refinement learning rate.
    pub gamma: f64,
    pub finetune_epochs_per_layer: usize,
    pub match_threshold: f64,
    pub seed: u64,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    /// Images drawn per fine-tune epoch; `None` uses the whole dataset.
    pub finetune_images: Option<usize>,
    pub scoring_batches: usize,
    pub scoring_batch_size: usize,
    /// Positive factor applied to the joint loss before scoring.
    pub loss_scale: f64,
    /// Detection-loss fine-tuning of the whole pruned model at the end.
    pub final_finetune_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            alpha: 1.0,
            m: 50.0,
            gamma: 1e-4,
            finetune_epochs_per_layer: 10,
            match_threshold: 0.5,
            seed: 0,
            finetune_lr: 1e-3,
            finetune_batch_size: 16,
            finetune_images: None,
            scoring_batches: 8,
            scoring_batch_size: 16,
            loss_scale: 1.0,
            final_finetune_epochs: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return bad("m must be finite and > 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return bad("match_threshold must lie in (0, 1)");
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return bad("finetune_lr must be finite and >= 0");
        }
        if self.finetune_batch_size == 0 || self.scoring_batches == 0 || self.scoring_batch_size == 0 {
            return bad("batch sizes and counts must be >= 1");
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return bad("loss_scale must be finite and > 0");
        }
        Ok(())
    }

    /// `"baseline"` when the auxiliary term is switched off.
    pub fn mode(&self) -> &'static str {
        if self.alpha == 0.0 {
            "baseline"
        } else {
            "lcp"
        }
    }
}

/// Channels kept out of `channels`: `max(1, round((1 - eta) * channels))`.
pub fn keep_count(channels: usize, eta: f64) -> usize {
    (((1.0 - eta) * channels as f64).round() as usize).clamp(1, channels.max(1))
}

/// Retained input channels of one layer's successor filter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_index: usize,
    /// Strictly increasing.
    pub retained: Vec<usize>,
    pub budget: usize,
}

/// `(1 / 2Q) * ||f - pred||^2` with `Q` the element count of `f`.
pub fn reconstruction_loss_from_output(tape: &mut Tape, f: Var, pred: Var) -> Result<Var> {
    let q = tape.value(f).len();
    if tape.value(f).shape() != tape.value(pred).shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            tape.value(f).shape(),
            tape.value(pred).shape(),
        ));
    }
    let diff = tape.sub(pred, f)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.mul_scalar(s, 0.5 / q as f64))
}

/// Reconstruction error of `f` by the 3x3 convolution `x * w`.
pub fn reconstruction_loss(tape: &mut Tape, f: Var, x: Var, w: Var, stride: usize) -> Result<Var> {
    let pred = tape.conv2d(x, w, None, stride, 1)?;
    reconstruction_loss_from_output(tape, f, pred)
}

/// `L_re + alpha * L_a`; a missing `L_a` (no positives) contributes 0.
pub fn joint_loss(tape: &mut Tape, l_re: Var, l_a: Option<Var>, alpha: f64) -> Result<Var> {
    let check = |tape: &Tape, v: Var, what: &'static str| -> Result<()> {
        let x = tape.value(v).item().ok_or_else(|| Error::shape(what, tape.value(v).shape(), &[]))?;
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} is {x}")))
        }
    };
    check(tape, l_re, "reconstruction loss")?;
    match l_a {
        Some(a) if alpha != 0.0 => {
            check(tape, a, "auxiliary loss")?;
            let scaled = tape.mul_scalar(a, alpha);
            tape.add(l_re, scaled)
        }
        Some(a) => {
            check(tape, a, "auxiliary loss")?;
            Ok(l_re)
        }
        None => Ok(l_re),
    }
}

/// `S_k = sum of squared entries of grad[:, k, :, :]`.
pub fn channel_importance(grad: &Tensor) -> Result<Vec<f64>> {
    let s = grad.shape();
    if s.len() != 4 {
        return Err(Error::shape("channel_importance", s, &[0, 0, 0, 0]));
    }
    let k = s[2] * s[3];
    let mut scores = vec![0.0; s[1]];
    for (i, chunk) in grad.data().chunks(k).enumerate() {
        scores[i % s[1]] += chunk.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(scores)
}

/// The `k` highest scores, ties toward the lower index, as a sorted mask.
pub fn select_channels(scores: &[f64], k: usize, layer_index: usize) -> Result<PruneMask> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {} channels",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("channel score {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut retained = order[..k].to_vec();
    retained.sort_unstable();
    Ok(PruneMask {
        layer_index,
        retained,
        budget: k,
    })
}

/// `steps` SGD updates `W_C -= gamma * dL/dW_C` of the retained input
/// slices of `w`; dropped slices are zeroed first and stay zero.
/// `grad` returns `dL/dW` at the given weights for step `i`.
pub fn refine_selected(
    w: &Tensor,
    mask: &PruneMask,
    gamma: f64,
    steps: usize,
    mut grad: impl FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 4 {
        return Err(Error::shape("refine_selected", s, &[0, 0, 0, 0]));
    }
    if mask.retained.iter().any(|&c| c >= s[1]) {
        return Err(Error::InvalidArgument("mask index beyond filter input channels".into()));
    }
    let dropped = crate::detector::dropped_channels(&mask.retained, s[1]);
    let mut w = w.clone();
    crate::detector::zero_in_channels(&mut w, &dropped);
    for step in 0..steps {
        let mut g = grad(step, &w)?;
        if g.shape() != w.shape() {
            return Err(Error::shape("refine_selected gradient", g.shape(), w.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("refinement gradient at step {step}")));
        }
        crate::detector::zero_in_channels(&mut g, &dropped);
        w.axpy(-gamma, &g)?;
    }
    Ok(w)
}

/// Per-layer squared-gradient mass of each joint-loss component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientLedger {
    pub layers: Vec<LedgerRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub layer: usize,
    /// `sum_k S_k` of the gradients of `L_re`, `alpha * L_ac` and `alpha * L_ar`.
    pub reconstruction: f64,
    pub classification: f64,
    pub regression: f64,
}

impl LedgerRow {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.classification + self.regression
    }

    /// Component shares in percent; all zero when there is no mass.
    pub fn percentages(&self) -> [f64; 3] {
        let t = self.total();
        if t > 0.0 {
            [self.reconstruction, self.classification, self.regression].map(|v| 100.0 * v / t)
        } else {
            [0.0; 3]
        }
    }
}

impl GradientLedger {
    /// One row per pruned layer with the three percentages.
    pub fn table(&self) -> String {
        let mut s = format!("{:>5}  {:>8}  {:>8}  {:>8}\n", "layer", "L_re %", "L_ac %", "L_ar %");
        for row in &self.layers {
            let [a, b, c] = row.percentages();
            s.push_str(&format!("{:>5}  {a:>8.2}  {b:>8.2}  {c:>8.2}\n", row.layer));
        }
        s
    }
}
