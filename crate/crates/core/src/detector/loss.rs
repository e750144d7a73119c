use crate::autodiff::{softmax, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{match_box, BBox, BoxCoder, MatchResult};
use crate::tensor::Tensor;

/// Per-anchor matching of one image against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTargets {
    pub matches: Vec<MatchResult>,
    /// `(anchor index, gt index)` of every positive, in anchor order.
    pub positives: Vec<(usize, usize)>,
}

impl ImageTargets {
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }
}

pub fn match_anchors(anchors: &[BBox], gts: &[BBox], threshold: f64) -> ImageTargets {
    let matches: Vec<MatchResult> = anchors.iter().map(|a| match_box(a, gts, threshold)).collect();
    let positives = matches
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.matched_gt.filter(|_| m.is_positive).map(|g| (i, g)))
        .collect();
    ImageTargets { matches, positives }
}

/// The `ratio * max(num_positives, 1)` negatives with the highest background
/// cross-entropy, ties toward the lower anchor index; returned in anchor order.
pub fn hard_negatives(logits: &Tensor, targets: &ImageTargets, ratio: usize) -> Vec<usize> {
    let k = logits.shape()[1];
    let mut scored: Vec<(f64, usize)> = targets
        .matches
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_positive)
        .map(|(i, _)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let (_, lse) = softmax(row);
            (lse - row[0], i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = (ratio * targets.num_positives().max(1)).min(scored.len());
    let mut chosen: Vec<usize> = scored[..take].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    /// Cross-entropy summed over positives and mined negatives.
    pub classification: Var,
    /// `m * sum(1 - GIoU)` over positives; a constant 0 without positives.
    pub regression: Var,
    pub total: Var,
    pub num_positives: usize,
    pub num_negatives: usize,
}

/// SSD-style loss of one image. `labels[g]` is the foreground class of
/// `gts[g]` (background is class 0).
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    offsets: Var,
    anchors: &[BBox],
    targets: &ImageTargets,
    labels: &[usize],
    gts: &[BBox],
    m: f64,
    neg_ratio: usize,
    coder: &BoxCoder,
) -> Result<DetectionLoss> {
    let lshape = tape.value(logits).shape().to_vec();
    if lshape.len() != 2 || lshape[0] != anchors.len() || targets.matches.len() != anchors.len() {
        return Err(Error::shape("detection_loss logits", &lshape, &[anchors.len(), 0]));
    }
    if labels.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} boxes",
            labels.len(),
            gts.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c == 0 || c >= lshape[1]) {
        return Err(Error::InvalidArgument(format!("foreground label {bad} out of range")));
    }
    let negatives = hard_negatives(tape.value(logits), targets, neg_ratio);
    let mut cls_targets: Vec<(usize, usize)> = targets.positives.iter().map(|&(a, g)| (a, labels[g])).collect();
    cls_targets.extend(negatives.iter().map(|&a| (a, 0)));
    let classification = tape.softmax_cross_entropy(logits, &cls_targets)?;

    let regression = if targets.positives.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let idx: Vec<usize> = targets.positives.iter().flat_map(|&(a, _)| (a * 4)..(a * 4 + 4)).collect();
        let p = targets.positives.len();
        let rows = tape.gather(offsets, idx, vec![p, 4])?;
        let pos_anchors: Vec<BBox> = targets.positives.iter().map(|&(a, _)| anchors[a]).collect();
        let pos_gts: Vec<BBox> = targets.positives.iter().map(|&(_, g)| gts[g]).collect();
        let decoded = tape.decode_boxes(rows, &pos_anchors, coder)?;
        tape.giou_loss(decoded, &pos_gts, m)?
    };
    let total = tape.add(classification, regression)?;
    Ok(DetectionLoss {
        classification,
        regression,
        total,
        num_positives: targets.positives.len(),
        num_negatives: negatives.len(),
    })
}
