//! Toy single-shot detector: a conv+ReLU backbone feeding one 3x3
//! prediction head over a grid of default boxes.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{detection_loss, hard_negatives, match_anchors, DetectionLoss, ImageTargets};
pub use train::{batch_gradients, train, EpochLog, Sgd, TrainConfig, TrainReport};

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxCoder};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 3x3 convolution, padding 1.
    Conv { stride: usize },
    /// Per-channel additive bias of the preceding conv.
    Bias,
    Relu,
    /// 3x3 prediction convolution, stride 1, padding 1.
    Head,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv { stride: 1 } => 1,
            LayerKind::Conv { stride: 2 } => 2,
            LayerKind::Conv { .. } => unreachable!("only strides 1 and 2 are supported"),
            LayerKind::Bias => 3,
            LayerKind::Relu => 4,
            LayerKind::Head => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Conv { stride: 1 },
            2 => LayerKind::Conv { stride: 2 },
            3 => LayerKind::Bias,
            4 => LayerKind::Relu,
            5 => LayerKind::Head,
            _ => return None,
        })
    }

    fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// `[Cout, Cin, 3, 3]` for convs, `[C]` for biases, `[0]` for ReLU.
    pub weight: Tensor,
}

/// Default-box layout of the single detection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub image_size: usize,
    pub grid: usize,
    /// Box side lengths (pixels) before the aspect adjustment.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: 16,
            scales: vec![12.0, 18.0, 27.0],
            aspect_ratios: vec![0.8, 1.25],
        }
    }
}

impl HeadSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn num_boxes(&self) -> usize {
        self.grid * self.grid * self.anchors_per_cell()
    }

    /// Default boxes in row index order `(cell_y * grid + cell_x) * A + a`,
    /// with `a = scale_index * n_ratios + ratio_index`, clipped to the image.
    pub fn default_boxes(&self) -> Vec<BBox> {
        let cell = self.image_size as f64 / self.grid as f64;
        let size = self.image_size as f64;
        let mut out = Vec::with_capacity(self.num_boxes());
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let cx = (gx as f64 + 0.5) * cell;
                let cy = (gy as f64 + 0.5) * cell;
                for &s in &self.scales {
                    for &ar in &self.aspect_ratios {
                        let w = s * ar.sqrt();
                        let h = s / ar.sqrt();
                        let b = BBox::from_center(cx, cy, w, h).expect("positive anchor size");
                        out.push(b.clip(size, size).expect("anchor centre inside image"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub in_channels: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    pub head: HeadSpec,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32, 64, 64, 64],
            strides: vec![2, 2, 1, 1, 1, 1],
            in_channels: 3,
            num_classes: 5,
            head: HeadSpec::default(),
        }
    }
}

/// A conv layer together with its bias and (for backbone stages) ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub conv: usize,
    pub bias: usize,
    pub relu: Option<usize>,
}

impl Stage {
    /// Index of the layer whose output is this stage's output.
    pub fn output(&self) -> usize {
        self.relu.unwrap_or(self.bias)
    }
}

/// Class logits `[num_boxes, num_classes]` and box offsets `[num_boxes, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub class_logits: Tensor,
    pub box_offsets: Tensor,
}

/// Taped forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub offsets: Var,
    /// Output of every layer, indexed like [`ModelGraph::layers`].
    pub layer_outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// Retained output channels, stored on the conv layer of a pruned stage.
    pub masks: Vec<Option<Vec<usize>>>,
    pub head: HeadSpec,
    pub num_classes: usize,
    pub coder: BoxCoder,
}

impl ModelGraph {
    /// He-initialised detector; the random stream is derived from `seed`.
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        if config.widths.len() != config.strides.len() || config.widths.is_empty() {
            return Err(Error::InvalidArgument("widths and strides must be non-empty and equal length".into()));
        }
        let mut rng = rng_for(seed, "detector-init");
        let mut layers = Vec::new();
        let mut cin = config.in_channels;
        for (&w, &s) in config.widths.iter().zip(&config.strides) {
            if s != 1 && s != 2 {
                return Err(Error::InvalidArgument(format!("unsupported stride {s}")));
            }
            layers.push(Layer {
                kind: LayerKind::Conv { stride: s },
                weight: he_normal(&[w, cin, 3, 3], &mut rng, 1.0),
            });
            layers.push(Layer {
                kind: LayerKind::Bias,
                weight: Tensor::zeros(&[w]),
            });
            layers.push(Layer {
                kind: LayerKind::Relu,
                weight: Tensor::zeros(&[0]),
            });
            cin = w;
        }
        let a = config.head.anchors_per_cell();
        let out = a * (config.num_classes + 4);
        layers.push(Layer {
            kind: LayerKind::Head,
            weight: he_normal(&[out, cin, 3, 3], &mut rng, 0.1),
        });
        layers.push(Layer {
            kind: LayerKind::Bias,
            weight: Tensor::zeros(&[out]),
        });
        let masks = vec![None; layers.len()];
        let model = Self {
            layers,
            masks,
            head: config.head.clone(),
            num_classes: config.num_classes,
            coder: BoxCoder::default(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Check layer ordering, channel agreement and head width.
    pub fn validate(&self) -> Result<()> {
        if self.masks.len() != self.layers.len() {
            return Err(Error::InvalidArgument("one mask slot per layer required".into()));
        }
        let stages = self.stages()?;
        let mut cin = None;
        for (i, st) in stages.iter().enumerate() {
            let w = self.layers[st.conv].weight.shape();
            if w.len() != 4 || w[2] != 3 || w[3] != 3 {
                return Err(Error::shape("ModelGraph conv", w, &[0, 0, 3, 3]));
            }
            if let Some(c) = cin {
                if w[1] != c {
                    return Err(Error::shape("ModelGraph stage input", w, &[w[0], c, 3, 3]));
                }
            }
            if self.layers[st.bias].weight.shape() != [w[0]] {
                return Err(Error::shape("ModelGraph bias", self.layers[st.bias].weight.shape(), &[w[0]]));
            }
            let is_head = i + 1 == stages.len();
            if is_head != (self.layers[st.conv].kind == LayerKind::Head) {
                return Err(Error::InvalidArgument("the head must be the last stage".into()));
            }
            cin = Some(w[0]);
        }
        let head_out = cin.expect("at least one stage");
        if head_out != self.head.anchors_per_cell() * (self.num_classes + 4) {
            return Err(Error::InvalidArgument(format!(
                "head width {head_out} does not match {} anchors x ({} classes + 4)",
                self.head.anchors_per_cell(),
                self.num_classes
            )));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if let Some(m) = m {
                let channels = match self.layers[i].kind {
                    LayerKind::Conv { .. } => self.layers[i].weight.shape()[0],
                    _ => return Err(Error::InvalidArgument(format!("mask on non-conv layer {i}"))),
                };
                if m.is_empty() || m.windows(2).any(|w| w[0] >= w[1]) || m.iter().any(|&c| c >= channels) {
                    return Err(Error::InvalidArgument(format!("invalid channel mask on layer {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> Result<Vec<Stage>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            if !self.layers[i].kind.is_conv() {
                return Err(Error::InvalidArgument(format!("layer {i}: expected a conv or head")));
            }
            if self.layers.get(i + 1).map(|l| l.kind) != Some(LayerKind::Bias) {
                return Err(Error::InvalidArgument(format!("layer {}: expected a bias", i + 1)));
            }
            let relu = (self.layers.get(i + 2).map(|l| l.kind) == Some(LayerKind::Relu)).then_some(i + 2);
            out.push(Stage {
                conv: i,
                bias: i + 1,
                relu,
            });
            i += if relu.is_some() { 3 } else { 2 };
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        Ok(out)
    }

    /// Backbone stages whose output channels can be pruned: every stage
    /// followed by another stage.
    pub fn prunable_stages(&self) -> Result<Vec<usize>> {
        let n = self.stages()?.len();
        Ok((0..n - 1).collect())
    }

    pub fn stage_channels(&self, stage: usize) -> Result<usize> {
        let st = self.stage(stage)?;
        Ok(self.layers[st.conv].weight.shape()[0])
    }

    pub fn stage(&self, stage: usize) -> Result<Stage> {
        self.stages()?
            .get(stage)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no stage {stage}")))
    }

    pub fn stage_mask(&self, stage: usize) -> Result<Option<&[usize]>> {
        let st = self.stage(stage)?;
        Ok(self.masks[st.conv].as_deref())
    }

    /// Total stride of the output of `stage` relative to the image.
    pub fn stage_stride(&self, stage: usize) -> Result<usize> {
        let stages = self.stages()?;
        Ok(stages[..=stage]
            .iter()
            .map(|s| match self.layers[s.conv].kind {
                LayerKind::Conv { stride } => stride,
                _ => 1,
            })
            .product())
    }

    pub fn default_boxes(&self) -> Vec<BBox> {
        self.head.default_boxes()
    }

    /// Record `retained` as the kept output channels of `stage` and zero
    /// everything that feeds from or into the dropped ones.
    pub fn set_stage_mask(&mut self, stage: usize, retained: Vec<usize>) -> Result<()> {
        let st = self.stage(stage)?;
        if self.layers[st.conv].kind == LayerKind::Head {
            return Err(Error::InvalidArgument("the head's outputs cannot be pruned".into()));
        }
        self.masks[st.conv] = Some(retained);
        self.validate()?;
        self.apply_masks()
    }

    /// Zero the out-filters and biases of dropped channels and the matching
    /// input slices of the next stage's filter.
    pub fn apply_masks(&mut self) -> Result<()> {
        let stages = self.stages()?;
        for (i, st) in stages.iter().enumerate() {
            let Some(keep) = self.masks[st.conv].clone() else { continue };
            let dropped = dropped_channels(&keep, self.layers[st.conv].weight.shape()[0]);
            zero_out_channels(&mut self.layers[st.conv].weight, &dropped);
            zero_out_channels(&mut self.layers[st.bias].weight, &dropped);
            if let Some(next) = stages.get(i + 1) {
                zero_in_channels(&mut self.layers[next.conv].weight, &dropped);
            }
        }
        Ok(())
    }

    /// Zero gradient entries that [`Self::apply_masks`] would zero.
    pub fn mask_gradients(&self, grads: &mut [Tensor]) -> Result<()> {
        let stages = self.stages()?;
        for (i, st) in stages.iter().enumerate() {
            let Some(keep) = self.masks[st.conv].as_ref() else { continue };
            let dropped = dropped_channels(keep, self.layers[st.conv].weight.shape()[0]);
            zero_out_channels(&mut grads[st.conv], &dropped);
            zero_out_channels(&mut grads[st.bias], &dropped);
            if let Some(next) = stages.get(i + 1) {
                zero_in_channels(&mut grads[next.conv], &dropped);
            }
        }
        Ok(())
    }

    /// Register every layer's weight on `tape`, as a leaf where `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if trainable(i) && l.kind != LayerKind::Relu {
                    tape.leaf(l.weight.clone())
                } else {
                    tape.constant(l.weight.clone())
                }
            })
            .collect()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let cin = self.layers[0].weight.shape()[1];
        [1, cin, self.head.image_size, self.head.image_size]
    }

    /// Apply layers `range` to `x`, returning each layer's output.
    pub fn forward_layers(&self, tape: &mut Tape, params: &[Var], x: Var, range: Range<usize>) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(range.len());
        let mut cur = x;
        for i in range {
            cur = match self.layers[i].kind {
                LayerKind::Conv { stride } => tape.conv2d(cur, params[i], None, stride, 1)?,
                LayerKind::Head => tape.conv2d(cur, params[i], None, 1, 1)?,
                LayerKind::Bias => add_channel_bias(tape, cur, params[i])?,
                LayerKind::Relu => tape.relu(cur),
            };
            outs.push(cur);
        }
        Ok(outs)
    }

    /// Full forward pass of a `[1, C, H, W]` (or `[C, H, W]`) image.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<ForwardPass> {
        let expect = self.input_shape();
        let shape = tape.value(image).shape().to_vec();
        let image = if shape == expect[1..] {
            tape.reshape(image, expect.to_vec())?
        } else if shape == expect {
            image
        } else {
            return Err(Error::shape("detector input", &shape, &expect));
        };
        let layer_outputs = self.forward_layers(tape, params, image, 0..self.layers.len())?;
        let head = *layer_outputs.last().expect("non-empty model");
        let (logits, offsets) = self.head_rows(tape, head)?;
        Ok(ForwardPass {
            logits,
            offsets,
            layer_outputs,
        })
    }

    /// Rearrange head output `[1, A*(K+4), G, G]` into per-box rows.
    pub fn head_rows(&self, tape: &mut Tape, head: Var) -> Result<(Var, Var)> {
        let a = self.head.anchors_per_cell();
        let k = self.num_classes;
        let d = k + 4;
        let shape = tape.value(head).shape().to_vec();
        let g = self.head.grid;
        if shape != [1, a * d, g, g] {
            return Err(Error::shape("head output", &shape, &[1, a * d, g, g]));
        }
        let n = g * g * a;
        let mut cls_idx = Vec::with_capacity(n * k);
        let mut box_idx = Vec::with_capacity(n * 4);
        for y in 0..g {
            for x in 0..g {
                for ai in 0..a {
                    let at = |ch: usize| ((ai * d + ch) * g + y) * g + x;
                    cls_idx.extend((0..k).map(at));
                    box_idx.extend((k..d).map(at));
                }
            }
        }
        let logits = tape.gather(head, cls_idx, vec![n, k])?;
        let offsets = tape.gather(head, box_idx, vec![n, 4])?;
        Ok((logits, offsets))
    }

    /// Untaped prediction for one image.
    pub fn predict(&self, image: &Tensor) -> Result<DetectionOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, |_| false);
        let x = tape.constant(image.clone());
        let pass = self.forward(&mut tape, &params, x)?;
        Ok(DetectionOutput {
            class_logits: tape.value(pass.logits).clone(),
            box_offsets: tape.value(pass.offsets).clone(),
        })
    }

    /// Every layer's output for one image, untaped.
    pub fn feature_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, |_| false);
        let x = tape.constant(image.clone());
        let pass = self.forward(&mut tape, &params, x)?;
        Ok(pass.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Output of layer `layer` for one image, untaped; `[1, C, H, W]`.
    pub fn layer_output(&self, image: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.layers.len() {
            return Err(Error::InvalidArgument(format!("no layer {layer}")));
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, |_| false);
        let shape = self.input_shape();
        let x = tape.constant(image.clone().reshape(shape.to_vec())?);
        let outs = self.forward_layers(&mut tape, &params, x, 0..layer + 1)?;
        Ok(tape.value(outs[layer]).clone())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn weights_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite())
    }
}

fn he_normal<R: Rng>(shape: &[usize], rng: &mut R, gain: f64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let d = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

/// `x [1, C, H, W] + bias [C]`, expressed with taped ops.
pub(crate) fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = tape.value(bias).len();
    if shape.len() != 4 || shape[1] != c {
        return Err(Error::shape("bias", &shape, &[c]));
    }
    let plane = shape[2] * shape[3];
    let index: Vec<usize> = (0..shape[0] * c * plane).map(|i| (i / plane) % c).collect();
    let expanded = tape.gather(bias, index, shape)?;
    tape.add(x, expanded)
}

pub(crate) fn dropped_channels(keep: &[usize], total: usize) -> Vec<usize> {
    (0..total).filter(|c| keep.binary_search(c).is_err()).collect()
}

/// Zero slices `[c, ...]` along the leading axis.
fn zero_out_channels(t: &mut Tensor, channels: &[usize]) {
    if t.shape().is_empty() || t.is_empty() {
        return;
    }
    let per = t.len() / t.shape()[0];
    for &c in channels {
        t.data_mut()[c * per..(c + 1) * per].fill(0.0);
    }
}

/// Zero slices `[:, c, ...]` of a `[Cout, Cin, kH, kW]` filter.
pub(crate) fn zero_in_channels(t: &mut Tensor, channels: &[usize]) {
    let s = t.shape().to_vec();
    let k = s[2] * s[3];
    for o in 0..s[0] {
        for &c in channels {
            let at = (o * s[1] + c) * k;
            t.data_mut()[at..at + k].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests;
