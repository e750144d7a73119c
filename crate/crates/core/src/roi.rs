//! RoIAlign, its contextual variant, and the auxiliary classification /
//! GIoU-regression head used to score channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tap, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{enclosing_box, iou, BBox, BoxCoder};
use crate::tensor::Tensor;

/// How an RoI is sampled: image-to-feature scale, output grid and the
/// number of bilinear samples per bin (a perfect square).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSampling {
    pub spatial_scale: f64,
    pub output_bins: (usize, usize),
    pub samples_per_bin: usize,
}

impl RoiSampling {
    pub fn new(spatial_scale: f64, output_bins: (usize, usize), samples_per_bin: usize) -> Result<Self> {
        let s = Self {
            spatial_scale,
            output_bins,
            samples_per_bin,
        };
        s.validate()?;
        Ok(s)
    }

    /// 3x3 bins with 4 samples each.
    pub fn standard(spatial_scale: f64) -> Self {
        Self {
            spatial_scale,
            output_bins: (3, 3),
            samples_per_bin: 4,
        }
    }

    fn grid(&self) -> usize {
        (self.samples_per_bin as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid();
        if self.output_bins.0 == 0 || self.output_bins.1 == 0 {
            return Err(Error::InvalidArgument("RoI output bins must be positive".into()));
        }
        if self.samples_per_bin == 0 || g * g != self.samples_per_bin {
            return Err(Error::InvalidArgument(format!(
                "samples_per_bin {} is not a perfect square",
                self.samples_per_bin
            )));
        }
        if !(self.spatial_scale > 0.0) {
            return Err(Error::InvalidArgument("spatial_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.output_bins.0 * self.output_bins.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSpec {
    pub bbox: BBox,
    pub sampling: RoiSampling,
}

/// Feature-plane coordinates `(x, y)` of every sample, grouped by bin in
/// row-major bin order.
///
/// Image coordinate `u` maps to feature coordinate `u * scale - 0.5`, so
/// feature cell `j` has its centre at `x = j`.
pub fn sample_points(spec: &RoiSpec) -> Vec<Vec<(f64, f64)>> {
    let s = &spec.sampling;
    let g = s.grid();
    let (rows, cols) = s.output_bins;
    let fx1 = spec.bbox.x1() * s.spatial_scale - 0.5;
    let fy1 = spec.bbox.y1() * s.spatial_scale - 0.5;
    let bin_w = spec.bbox.width() * s.spatial_scale / cols as f64;
    let bin_h = spec.bbox.height() * s.spatial_scale / rows as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut pts = Vec::with_capacity(g * g);
            for sy in 0..g {
                let y = fy1 + (r as f64 + (sy as f64 + 0.5) / g as f64) * bin_h;
                for sx in 0..g {
                    let x = fx1 + (c as f64 + (sx as f64 + 0.5) / g as f64) * bin_w;
                    pts.push((x, y));
                }
            }
            out.push(pts);
        }
    }
    out
}

/// Interpolation taps of one point, clamped to the border of an `h x w` plane.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize, weight: f64, out: &mut Vec<Tap>) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let hx = 1.0 - lx;
    let hy = 1.0 - ly;
    out.push((y0 * w + x0, weight * hy * hx));
    out.push((y0 * w + x1, weight * hy * lx));
    out.push((y1 * w + x0, weight * ly * hx));
    out.push((y1 * w + x1, weight * ly * lx));
}

/// Average-of-bilinear-samples RoIAlign over a `[C, H, W]` feature map.
/// Returns `[C, rows, cols]`.
pub fn roi_align(tape: &mut Tape, feature: Var, spec: &RoiSpec) -> Result<Var> {
    spec.sampling.validate()?;
    let shape = tape.value(feature).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("roi_align", &shape, &[0, 0, 0]));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let scaled = spec.bbox.scale(spec.sampling.spatial_scale)?;
    if scaled.clip(w as f64, h as f64).is_none() {
        return Err(Error::InvalidArgument(format!(
            "RoI {:?} has no area inside the {h}x{w} feature map",
            spec.bbox
        )));
    }
    let weight = 1.0 / spec.sampling.samples_per_bin as f64;
    let taps = sample_points(spec)
        .into_iter()
        .map(|pts| {
            let mut t = Vec::with_capacity(4 * pts.len());
            for (x, y) in pts {
                bilinear_taps(x, y, h, w, weight, &mut t);
            }
            t
        })
        .collect();
    let (rows, cols) = spec.sampling.output_bins;
    tape.bilinear_sample(feature, taps, vec![c, rows, cols])
}

/// `roi_align(default_box) + roi_align(enclosing_box(gt, default_box))`.
///
/// Only defined for positive samples: the default box must overlap the
/// ground truth by more than `match_threshold`.
pub fn contextual_roi_align(
    tape: &mut Tape,
    feature: Var,
    default_box: &BBox,
    gt_box: &BBox,
    sampling: &RoiSampling,
    match_threshold: f64,
) -> Result<Var> {
    let overlap = iou(default_box, gt_box);
    if !(overlap > match_threshold) {
        return Err(Error::Contract(format!(
            "contextual RoIAlign on a negative sample (IoU {overlap:.4} <= {match_threshold})"
        )));
    }
    let own = roi_align(
        tape,
        feature,
        &RoiSpec {
            bbox: *default_box,
            sampling: *sampling,
        },
    )?;
    let context = roi_align(
        tape,
        feature,
        &RoiSpec {
            bbox: enclosing_box(gt_box, default_box),
            sampling: *sampling,
        },
    )?;
    tape.add(own, context)
}

/// A matched default box, its ground truth and the ground-truth class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxPositive {
    pub default_box: BBox,
    pub gt_box: BBox,
    pub class: usize,
}

/// Auxiliary head: bin-averaged features -> class logits, flattened
/// features -> box offsets relative to the default box.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHead {
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
    pub box_weight: Tensor,
    pub box_bias: Tensor,
}

/// An [`AuxHead`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AuxHeadVars {
    pub cls_weight: Var,
    pub cls_bias: Var,
    pub box_weight: Var,
    pub box_bias: Var,
}

impl AuxHead {
    pub fn new<R: Rng>(channels: usize, num_classes: usize, sampling: &RoiSampling, rng: &mut R) -> Self {
        let flat = channels * sampling.bins();
        let cls_std = (1.0 / channels as f64).sqrt();
        let box_std = 0.01 / (flat as f64).sqrt();
        let normal = |std: f64, n: usize, rng: &mut R| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        Self {
            cls_weight: Tensor::new(vec![num_classes, channels], normal(cls_std, num_classes * channels, rng))
                .expect("cls weight"),
            cls_bias: Tensor::zeros(&[num_classes]),
            box_weight: Tensor::new(vec![4, flat], normal(box_std, 4 * flat, rng)).expect("box weight"),
            box_bias: Tensor::zeros(&[4]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls_weight.shape()[0]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.cls_weight,
            &mut self.cls_bias,
            &mut self.box_weight,
            &mut self.box_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AuxHeadVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AuxHeadVars {
            cls_weight: put(&self.cls_weight),
            cls_bias: put(&self.cls_bias),
            box_weight: put(&self.box_weight),
            box_bias: put(&self.box_bias),
        }
    }
}

impl AuxHeadVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.cls_weight, self.cls_bias, self.box_weight, self.box_bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuxLosses {
    /// Sum of cross-entropies over positives.
    pub classification: Var,
    /// Sum of `m * (1 - GIoU)` over positives.
    pub regression: Var,
    pub total: Var,
}

/// Auxiliary losses over the positives of one image.
///
/// `feature` is `[C, H, W]` or `[1, C, H, W]`. Returns `None` when there
/// are no positives; callers then score with reconstruction alone.
#[allow(clippy::too_many_arguments)]
pub fn aux_losses(
    tape: &mut Tape,
    feature: Var,
    positives: &[AuxPositive],
    head: &AuxHeadVars,
    sampling: &RoiSampling,
    match_threshold: f64,
    m: f64,
    coder: &BoxCoder,
) -> Result<Option<AuxLosses>> {
    if positives.is_empty() {
        return Ok(None);
    }
    if !(m > 0.0) {
        return Err(Error::InvalidArgument("regression coefficient m must be > 0".into()));
    }
    let shape = tape.value(feature).shape().to_vec();
    let feature = match shape.as_slice() {
        [1, c, h, w] => tape.reshape(feature, vec![*c, *h, *w])?,
        [_, _, _] => feature,
        _ => return Err(Error::shape("aux_losses", &shape, &[0, 0, 0])),
    };
    let channels = tape.value(feature).shape()[0];

    let mut pooled = Vec::with_capacity(positives.len());
    for p in positives {
        pooled.push(contextual_roi_align(
            tape,
            feature,
            &p.default_box,
            &p.gt_box,
            sampling,
            match_threshold,
        )?);
    }
    let (rows, cols) = sampling.output_bins;
    let n = positives.len();
    let stacked = tape.stack(&pooled)?; // [P, C, rows, cols]

    let avg = tape.avg_pool(stacked)?; // [P, C]
    let logits = tape.linear(avg, head.cls_weight, Some(head.cls_bias))?;
    let targets: Vec<(usize, usize)> = positives.iter().enumerate().map(|(i, p)| (i, p.class)).collect();
    let classification = tape.softmax_cross_entropy(logits, &targets)?;

    let flat = tape.reshape(stacked, vec![n, channels * rows * cols])?;
    let offsets = tape.linear(flat, head.box_weight, Some(head.box_bias))?;
    let anchors: Vec<BBox> = positives.iter().map(|p| p.default_box).collect();
    let boxes = tape.decode_boxes(offsets, &anchors, coder)?;
    let gts: Vec<BBox> = positives.iter().map(|p| p.gt_box).collect();
    let regression = tape.giou_loss(boxes, &gts, m)?;

    let total = tape.add(classification, regression)?;
    Ok(Some(AuxLosses {
        classification,
        regression,
        total,
    }))
}
