//! Detection evaluation: 11-point (VOC07) and all-point AP, COCO-style
//! averaging over IoU thresholds, and AP per object-size tercile.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::data::Dataset;
use crate::detector::ModelGraph;
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::geometry::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMetric {
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.
    Voc07,
    /// Area under the interpolated precision/recall curve.
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    /// Ignored boxes neither count as misses nor turn matches into false
    /// positives; used for size buckets.
    pub ignore: bool,
}

/// Canonical ranking: score descending, then image, then box corners, so
/// the result does not depend on the order detections were produced in.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then_with(|| {
            let (x, y) = (a.bbox.to_array(), b.bbox.to_array());
            x.iter().zip(&y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
}

/// Cumulative precision and recall of single-class `dets` against `gts`.
///
/// Detections are matched greedily in rank order to the unmatched,
/// non-ignored GT of the same image with the highest IoU `>= iou_thresh`.
/// A detection that instead overlaps an ignored GT, or whose own bucket
/// test `det_ignored` says so, is dropped from the curve. Returns `None`
/// when there are no non-ignored ground truths.
pub fn precision_recall(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    det_ignored: impl Fn(&Detection) -> bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let npos = gts.iter().filter(|g| !g.ignore).count();
    if npos == 0 {
        return None;
    }
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut taken = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut precision, mut recall) = (Vec::new(), Vec::new());
    for d in order {
        let cands = by_image.get(&d.image).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(f64, usize)> = None;
        let mut hits_ignored = false;
        for &g in cands {
            let o = iou(&d.bbox, &gts[g].bbox);
            if o < iou_thresh {
                continue;
            }
            if gts[g].ignore {
                hits_ignored = true;
            } else if !taken[g] && best.map_or(true, |(b, _)| o > b) {
                best = Some((o, g));
            }
        }
        match best {
            Some((_, g)) => {
                taken[g] = true;
                tp += 1;
            }
            None if hits_ignored || det_ignored(d) => continue,
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    Some((precision, recall))
}

/// AP from a cumulative precision/recall curve.
pub fn ap_from_curve(precision: &[f64], recall: &[f64], metric: ApMetric) -> f64 {
    match metric {
        ApMetric::Voc07 => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    precision
                        .iter()
                        .zip(recall)
                        .filter(|(_, &r)| r >= t - 1e-12)
                        .map(|(&p, _)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMetric::Continuous => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
    }
}

/// Single-class AP; `None` when there is nothing to recall.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64, metric: ApMetric) -> Option<f64> {
    let (p, r) = precision_recall(dets, gts, iou_thresh, |_| false)?;
    Some(ap_from_curve(&p, &r, metric))
}

/// Greedy NMS: indices kept, in rank order. Boxes overlapping a kept box
/// with IoU above `iou_thresh` are suppressed.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Candidates per class considered by NMS.
    pub pre_nms_top_k: usize,
    pub max_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: 0.5,
            pre_nms_top_k: 200,
            max_per_class: 50,
        }
    }
}

/// Post-processed detections of one image, tagged with `image`.
pub fn detect(model: &ModelGraph, image_index: usize, image: &crate::Tensor, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let out = model.predict(image)?;
    let anchors = model.default_boxes();
    let k = model.num_classes;
    let size = model.head.image_size as f64;
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); k];
    let mut decoded: Vec<Option<Option<BBox>>> = vec![None; anchors.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let (probs, _) = softmax(&out.class_logits.data()[a * k..(a + 1) * k]);
        for c in 1..k {
            if probs[c] < cfg.score_threshold {
                continue;
            }
            let bbox = *decoded[a].get_or_insert_with(|| {
                let t = &out.box_offsets.data()[a * 4..a * 4 + 4];
                let [x1, y1, x2, y2] = model.coder.decode(anchor, [t[0], t[1], t[2], t[3]]);
                BBox::new(x1, y1, x2, y2).ok().and_then(|b| b.clip(size, size))
            });
            if let Some(bbox) = bbox {
                per_class[c].push(Detection {
                    image: image_index,
                    class: c,
                    score: probs[c],
                    bbox,
                });
            }
        }
    }
    let mut result = Vec::new();
    for mut dets in per_class {
        dets.sort_by(rank);
        dets.truncate(cfg.pre_nms_top_k);
        let keep = nms(&dets, cfg.nms_iou);
        result.extend(keep.into_iter().take(cfg.max_per_class).map(|i| dets[i]));
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// VOC07 AP@0.5 for classes 1.., `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean of the defined per-class APs.
    pub map: f64,
    /// Continuous AP at IoU 0.5 and 0.75, and averaged over 0.5:0.05:0.95.
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    /// Continuous AP averaged over thresholds, per area tercile.
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// Area boundaries of the terciles.
    pub size_thresholds: [f64; 2],
}

pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Score previously computed detections against `dataset`'s annotations.
pub fn evaluate_detections(dets: &[Detection], dataset: &Dataset, num_classes: usize) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut areas: Vec<f64> = dataset.samples.iter().flat_map(|s| s.boxes.iter().map(BBox::area)).collect();
    areas.sort_by(f64::total_cmp);
    let size_thresholds = if areas.is_empty() {
        [0.0, 0.0]
    } else {
        [areas[areas.len() / 3], areas[2 * areas.len() / 3]]
    };
    let bucket = |a: f64| usize::from(a >= size_thresholds[0]) + usize::from(a >= size_thresholds[1]);

    let mut gts: Vec<Vec<GroundTruth>> = vec![Vec::new(); num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        for (b, &c) in s.boxes.iter().zip(&s.labels) {
            if c == 0 || c >= num_classes {
                return Err(Error::InvalidArgument(format!("label {c} outside 1..{num_classes}")));
            }
            gts[c].push(GroundTruth {
                image: i,
                bbox: *b,
                ignore: false,
            });
        }
    }
    let mut dets_by_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for d in dets {
        if d.class == 0 || d.class >= num_classes {
            return Err(Error::InvalidArgument(format!("detection class {} outside 1..{num_classes}", d.class)));
        }
        dets_by_class[d.class].push(*d);
    }

    let class_mean = |thresh: f64, metric: ApMetric, size: Option<usize>| -> Option<f64> {
        let aps: Vec<f64> = (1..num_classes)
            .filter_map(|c| {
                let g: Vec<GroundTruth> = gts[c]
                    .iter()
                    .map(|g| GroundTruth {
                        ignore: size.is_some_and(|s| bucket(g.bbox.area()) != s),
                        ..*g
                    })
                    .collect();
                let (p, r) = precision_recall(&dets_by_class[c], &g, thresh, |d| {
                    size.is_some_and(|s| bucket(d.bbox.area()) != s)
                })?;
                Some(ap_from_curve(&p, &r, metric))
            })
            .collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let coco = |size: Option<usize>| -> f64 {
        let v: Vec<f64> = COCO_THRESHOLDS
            .iter()
            .filter_map(|&t| class_mean(t, ApMetric::Continuous, size))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };

    let per_class_ap: Vec<Option<f64>> = (1..num_classes)
        .map(|c| average_precision(&dets_by_class[c], &gts[c], 0.5, ApMetric::Voc07))
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalResult {
        per_class_ap,
        map,
        ap50: class_mean(0.5, ApMetric::Continuous, None).unwrap_or(0.0),
        ap75: class_mean(0.75, ApMetric::Continuous, None).unwrap_or(0.0),
        ap: coco(None),
        ap_small: coco(Some(0)),
        ap_medium: coco(Some(1)),
        ap_large: coco(Some(2)),
        size_thresholds,
    })
}

/// Run the detector over `dataset` (images in parallel) and score it.
pub fn evaluate(model: &ModelGraph, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut dets = Vec::new();
    for r in map_ordered(&indices, |&i| detect(model, i, &dataset.samples[i].image, cfg)) {
        dets.extend(r?);
    }
    evaluate_detections(&dets, dataset, model.num_classes)
}

impl EvalResult {
    /// Aligned two-column text table.
    pub fn table(&self, class_names: &[String]) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        for (i, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names.get(i + 1).cloned().unwrap_or_else(|| format!("class {}", i + 1));
            let v = ap.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            rows.push((format!("AP@0.5 {name}"), v));
        }
        for (k, v) in [
            ("mAP@0.5 (11-pt)", self.map),
            ("AP@0.5", self.ap50),
            ("AP@0.75", self.ap75),
            ("AP@[.5:.95]", self.ap),
            ("AP small", self.ap_small),
            ("AP medium", self.ap_medium),
            ("AP large", self.ap_large),
        ] {
            rows.push((k.to_string(), format!("{v:.4}")));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v:>7}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image: usize, score: f64, bbox: BBox) -> Detection {
        Detection {
            image,
            class: 1,
            score,
            bbox,
        }
    }

    fn gt(image: usize, bbox: BBox) -> GroundTruth {
        GroundTruth {
            image,
            bbox,
            ignore: false,
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![gt(0, b(0., 0., 10., 10.)), gt(1, b(5., 5., 20., 20.))];
        let dets = vec![det(0, 0.2, b(0., 0., 10., 10.)), det(1, 0.9, b(5., 5., 20., 20.))];
        for m in [ApMetric::Voc07, ApMetric::Continuous] {
            assert_eq!(average_precision(&dets, &gts, 0.5, m), Some(1.0));
        }
    }

    #[test]
    fn no_detections_score_zero_and_no_gt_is_excluded() {
        let gts = vec![gt(0, b(0., 0., 10., 10.))];
        assert_eq!(average_precision(&[], &gts, 0.5, ApMetric::Voc07), Some(0.0));
        assert_eq!(average_precision(&[det(0, 0.5, b(0., 0., 1., 1.))], &[], 0.5, ApMetric::Voc07), None);
    }

    #[test]
    fn true_positive_ranked_first_then_flipped() {
        let gts = vec![gt(0, b(0., 0., 10., 10.))];
        let good = b(0., 0., 10., 10.);
        let bad = b(30., 30., 40., 40.);
        let first = vec![det(0, 0.9, good), det(0, 0.8, bad)];
        assert_eq!(average_precision(&first, &gts, 0.5, ApMetric::Voc07), Some(1.0));
        // False positive first: precision at full recall is 1/2 and every
        // one of the 11 recall points sees that maximum.
        let flipped = vec![det(0, 0.8, good), det(0, 0.9, bad)];
        let ap = average_precision(&flipped, &gts, 0.5, ApMetric::Voc07).unwrap();
        assert!((ap - 0.5).abs() < 1e-15, "{ap}");
    }

    #[test]
    fn each_gt_matches_once() {
        let gts = vec![gt(0, b(0., 0., 10., 10.))];
        let dets = vec![det(0, 0.9, b(0., 0., 10., 10.)), det(0, 0.8, b(0., 0., 10., 10.))];
        let (p, r) = precision_recall(&dets, &gts, 0.5, |_| false).unwrap();
        assert_eq!(p, vec![1.0, 0.5]);
        assert_eq!(r, vec![1.0, 1.0]);
    }

    #[test]
    fn continuous_ap_hand_curve() {
        // TP, FP, TP against 2 GTs: P = 1, 1/2, 2/3; R = 1/2, 1/2, 1.
        let ap = ap_from_curve(&[1.0, 0.5, 2.0 / 3.0], &[0.5, 0.5, 1.0], ApMetric::Continuous);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn nms_suppresses_overlaps_greedily() {
        let dets = vec![
            det(0, 0.5, b(0., 0., 10., 10.)),
            det(0, 0.9, b(1., 0., 11., 10.)),
            det(0, 0.7, b(20., 20., 30., 30.)),
        ];
        assert_eq!(nms(&dets, 0.5), vec![1, 2]);
    }

    #[test]
    fn table_lists_every_metric() {
        let r = EvalResult {
            per_class_ap: vec![Some(1.0), None],
            map: 1.0,
            ap50: 1.0,
            ap75: 0.5,
            ap: 0.5,
            ap_small: 0.1,
            ap_medium: 0.2,
            ap_large: 0.3,
            size_thresholds: [1.0, 2.0],
        };
        let t = r.table(&["background".into(), "circle".into(), "square".into()]);
        assert!(t.contains("AP@0.5 circle") && t.contains("AP large") && t.contains("      -"));
    }
}
