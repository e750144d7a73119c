use super::*;
use crate::autodiff::{check_gradients, softmax};
use crate::data::{Dataset, Sample};
use crate::geometry::giou;

fn micro_config() -> DetectorConfig {
    DetectorConfig {
        widths: vec![2, 3],
        strides: vec![2, 1],
        in_channels: 3,
        num_classes: 3,
        head: HeadSpec {
            image_size: 8,
            grid: 4,
            scales: vec![4.0],
            aspect_ratios: vec![1.0, 2.0],
        },
    }
}

fn random_image(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = rng_for(seed, "test-image");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

#[test]
fn default_boxes_cover_grid_inside_image() {
    let spec = HeadSpec::default();
    let boxes = spec.default_boxes();
    assert_eq!(boxes.len(), 16 * 16 * 6);
    assert!(boxes.iter().all(|b| b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 64.0 && b.y2() <= 64.0));
    // Row (y=0, x=1, a=0) is centred at (6, 2) before clipping.
    let (cx, _) = boxes[6].center();
    let w = 12.0 * 0.8f64.sqrt();
    assert!((cx - 6.0).abs() < 1e-12 && (boxes[6].width() - w).abs() < 1e-12);
}

#[test]
fn default_model_has_six_prunable_stages() {
    let m = ModelGraph::new(&DetectorConfig::default(), 0).unwrap();
    assert_eq!(m.stages().unwrap().len(), 7);
    assert_eq!(m.prunable_stages().unwrap(), (0..6).collect::<Vec<_>>());
    assert_eq!(m.stage_channels(3).unwrap(), 64);
    assert_eq!(m.stage_stride(1).unwrap(), 4);
    assert_eq!(m.num_classes, 5);
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let mut m = ModelGraph::new(&DetectorConfig::default(), 0).unwrap();
    for l in &mut m.layers {
        l.weight.data_mut().fill(0.0);
    }
    let out = m.predict(&random_image(&[3, 64, 64], 1)).unwrap();
    assert_eq!(out.class_logits.shape(), [1536, 5]);
    assert_eq!(out.box_offsets.shape(), [1536, 4]);
    assert!(out.class_logits.data().iter().all(|&v| v == 0.0));
    let (p, _) = softmax(&out.class_logits.data()[..5]);
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn forward_is_deterministic_and_copies_are_identical() {
    let m = ModelGraph::new(&DetectorConfig::default(), 4).unwrap();
    let img = random_image(&[3, 64, 64], 2);
    let a = m.feature_maps(&img).unwrap();
    let copy = m.clone();
    assert_eq!(a, m.feature_maps(&img).unwrap());
    assert_eq!(a, copy.feature_maps(&img).unwrap());
    assert_eq!(a.len(), m.layers.len());
}

#[test]
fn wrong_input_shape_is_a_shape_error() {
    let m = ModelGraph::new(&DetectorConfig::default(), 0).unwrap();
    let err = m.predict(&Tensor::zeros(&[3, 32, 32])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn head_rows_follow_anchor_layout() {
    let m = ModelGraph::new(&micro_config(), 0).unwrap();
    let mut tape = Tape::new();
    let (a, k, g) = (2, 3, 4);
    let head_len = a * (k + 4) * g * g;
    let head = tape.constant(Tensor::new(vec![1, a * (k + 4), g, g], (0..head_len).map(|v| v as f64).collect()).unwrap());
    let (logits, offsets) = m.head_rows(&mut tape, head).unwrap();
    // anchor (y=2, x=1, a=1) -> row (2*4+1)*2+1 = 19; class 2 is channel 1*7+2.
    let row = 19;
    let ch = |c: usize| ((c * g + 2) * g + 1) as f64;
    assert_eq!(tape.value(logits).data()[row * k + 2], ch(7 + 2));
    assert_eq!(tape.value(offsets).data()[row * 4 + 3], ch(7 + 3 + 3));
}

#[test]
fn mask_zeroes_dropped_slices_and_gradients() {
    let mut m = ModelGraph::new(&DetectorConfig::default(), 0).unwrap();
    m.set_stage_mask(1, vec![0, 5, 7]).unwrap();
    let st = m.stages().unwrap();
    let w1 = &m.layers[st[1].conv].weight;
    let w2 = &m.layers[st[2].conv].weight;
    for c in 0..32 {
        let kept = [0, 5, 7].contains(&c);
        let out_slice = &w1.data()[c * 16 * 9..(c + 1) * 16 * 9];
        assert_eq!(out_slice.iter().all(|&v| v == 0.0), !kept);
        for o in 0..32 {
            let at = (o * 32 + c) * 9;
            assert_eq!(w2.data()[at..at + 9].iter().all(|&v| v == 0.0), !kept);
        }
    }
    let mut grads: Vec<Tensor> = m.layers.iter().map(|l| Tensor::full(l.weight.shape(), 1.0)).collect();
    m.mask_gradients(&mut grads).unwrap();
    assert_eq!(grads[st[2].conv].sq_norm(), (32 * 3 * 9) as f64);
    assert!(m.set_stage_mask(6, vec![0]).is_err());
    assert!(m.set_stage_mask(0, vec![3, 3]).is_err());
}

fn single_anchor_targets(anchor: BBox, gts: &[BBox], threshold: f64) -> ImageTargets {
    match_anchors(&[anchor], gts, threshold)
}

#[test]
fn regression_loss_matches_m_times_one_minus_giou() {
    let anchor = b(0., 0., 10., 5.);
    let gt = b(0., 0., 10., 10.);
    assert!((giou(&anchor, &gt) - 0.5).abs() < 1e-15);
    let targets = single_anchor_targets(anchor, &[gt], 0.4);
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[1, 3]));
    let offsets = tape.constant(Tensor::zeros(&[1, 4]));
    let coder = BoxCoder::default();
    let l = detection_loss(&mut tape, logits, offsets, &[anchor], &targets, &[1], &[gt], 50.0, 3, &coder).unwrap();
    assert!((tape.value(l.regression).data()[0] - 25.0).abs() < 1e-12);
    assert_eq!(l.num_positives, 1);
}

#[test]
fn perfect_prediction_has_vanishing_loss() {
    let anchor = b(2., 2., 12., 12.);
    let other = b(40., 40., 50., 50.);
    let gt = b(3., 1., 13., 12.);
    let coder = BoxCoder::default();
    let targets = match_anchors(&[anchor, other], &[gt], 0.5);
    let t = coder.encode(&anchor, &gt);
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![2, 3], vec![-40., 0., -40., 0., -40., -40.]).unwrap());
    let mut off = t.to_vec();
    off.extend([0.0; 4]);
    let offsets = tape.constant(Tensor::new(vec![2, 4], off).unwrap());
    let l = detection_loss(&mut tape, logits, offsets, &[anchor, other], &targets, &[1], &[gt], 50.0, 3, &coder).unwrap();
    assert!(tape.value(l.classification).data()[0] < 1e-15);
    assert!(tape.value(l.regression).data()[0].abs() < 1e-9);
    assert_eq!((l.num_positives, l.num_negatives), (1, 1));
}

#[test]
fn image_without_ground_truth_has_zero_regression() {
    let anchors = HeadSpec::default().default_boxes();
    let targets = match_anchors(&anchors, &[], 0.5);
    let mut tape = Tape::new();
    let logits = tape.constant(random_image(&[anchors.len(), 5], 3));
    let offsets = tape.constant(random_image(&[anchors.len(), 4], 4));
    let l = detection_loss(&mut tape, logits, offsets, &anchors, &targets, &[], &[], 50.0, 3, &BoxCoder::default()).unwrap();
    assert_eq!(tape.value(l.regression).data()[0], 0.0);
    assert_eq!(l.num_negatives, 3);
    assert!(tape.value(l.classification).data()[0] > 0.0);
}

#[test]
fn hard_negatives_take_highest_background_loss_with_index_ties() {
    let anchors: Vec<BBox> = (0..6).map(|i| b(i as f64 * 20., 0., i as f64 * 20. + 5., 5.)).collect();
    let targets = match_anchors(&anchors, &[b(0., 0., 5., 5.)], 0.5);
    // Row 0 is the positive. Background losses: rows 2 and 4 tie highest,
    // then row 5, rows 1 and 3 lowest.
    let logits = Tensor::new(
        vec![6, 2],
        vec![0., 0., 0., -1., 0., 2., 0., -1., 0., 2., 0., 1.],
    )
    .unwrap();
    assert_eq!(hard_negatives(&logits, &targets, 2), vec![2, 4]);
    assert_eq!(hard_negatives(&logits, &targets, 3), vec![2, 4, 5]);
    assert_eq!(hard_negatives(&logits, &targets, 10).len(), 5);
}

#[test]
fn detection_loss_rejects_bad_labels() {
    let anchor = b(0., 0., 10., 10.);
    let targets = single_anchor_targets(anchor, &[anchor], 0.5);
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[1, 3]));
    let offsets = tape.constant(Tensor::zeros(&[1, 4]));
    let coder = BoxCoder::default();
    assert!(detection_loss(&mut tape, logits, offsets, &[anchor], &targets, &[0], &[anchor], 50.0, 3, &coder).is_err());
    assert!(detection_loss(&mut tape, logits, offsets, &[anchor], &targets, &[3], &[anchor], 50.0, 3, &coder).is_err());
}

fn two_box_instance() -> (Vec<BBox>, Vec<BBox>, ImageTargets) {
    let anchors = vec![b(0., 0., 10., 10.), b(20., 20., 34., 30.), b(40., 0., 50., 12.)];
    let gts = vec![b(1., 1., 11., 12.), b(22., 19., 35., 31.)];
    let targets = match_anchors(&anchors, &gts, 0.5);
    assert_eq!(targets.num_positives(), 2);
    (anchors, gts, targets)
}

#[test]
fn classification_and_regression_pass_gradcheck() {
    let (anchors, gts, targets) = two_box_instance();
    let coder = BoxCoder::default();
    let offsets = Tensor::new(vec![3, 4], vec![0.3, -0.2, 0.1, 0.2, -0.1, 0.4, -0.3, 0.05, 0.2, 0.2, 0.1, -0.1]).unwrap();
    let logits = random_image(&[3, 3], 7);
    let r = check_gradients(
        |tape, x| {
            let l = tape.constant(logits.clone());
            Ok(detection_loss(tape, l, x, &anchors, &targets, &[1, 2], &gts, 50.0, 3, &coder)?.regression)
        },
        &offsets,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    let r = check_gradients(
        |tape, x| {
            let o = tape.constant(offsets.clone());
            Ok(detection_loss(tape, x, o, &anchors, &targets, &[1, 2], &gts, 50.0, 3, &coder)?.classification)
        },
        &logits,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

fn micro_sample(seed: u64) -> Sample {
    Sample {
        image: random_image(&[3, 8, 8], seed),
        boxes: vec![b(0.5, 0.5, 4.5, 4.5)],
        labels: vec![2],
    }
}

#[test]
fn full_model_loss_passes_gradcheck_on_head_and_backbone() {
    let m = ModelGraph::new(&micro_config(), 9).unwrap();
    let sample = micro_sample(1);
    let anchors = m.default_boxes();
    let targets = match_anchors(&anchors, &sample.boxes, 0.5);
    assert!(targets.num_positives() > 0);
    for layer in [0, m.layers.len() - 2] {
        let r = check_gradients(
            |tape, w| {
                let mut params = m.bind(tape, |_| false);
                params[layer] = w;
                let x = tape.constant(sample.image.clone());
                let pass = m.forward(tape, &params, x)?;
                Ok(detection_loss(tape, pass.logits, pass.offsets, &anchors, &targets, &sample.labels, &sample.boxes, 50.0, 3, &m.coder)?.total)
            },
            &m.layers[layer].weight,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "layer {layer}: {r:?}");
    }
}

#[test]
fn sgd_step_matches_hand_computation() {
    let mut w = Tensor::from_vec(vec![1.5]);
    let g = Tensor::from_vec(vec![0.25]);
    let mut opt = Sgd::new(0.1, 0.0, 0.0);
    opt.step(vec![&mut w], &[g.clone()]).unwrap();
    assert_eq!(w.data()[0], 1.5 - 0.1 * 0.25);
    let mut w = Tensor::from_vec(vec![1.0]);
    let mut opt = Sgd::new(0.5, 0.9, 0.0);
    opt.step(vec![&mut w], &[g.clone()]).unwrap();
    opt.step(vec![&mut w], &[g]).unwrap();
    assert_eq!(w.data()[0], 1.0 - 0.5 * 0.25 - 0.5 * (0.9 * 0.25 + 0.25));
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut m = ModelGraph::new(&micro_config(), 2).unwrap();
    let before = m.clone();
    let data = Dataset {
        samples: vec![micro_sample(1), micro_sample(2), micro_sample(3)],
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, &cfg, None).unwrap();
    assert_eq!(m, before);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.loss.is_finite() && e.loss > 0.0));
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let mut m = ModelGraph::new(&micro_config(), 2).unwrap();
    let data = Dataset {
        samples: vec![micro_sample(1), micro_sample(2)],
    };
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 2,
        lr: 0.01,
        lr_milestones: vec![],
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, &cfg, None).unwrap();
    assert!(report.epochs.last().unwrap().loss < report.epochs[0].loss);
}

#[test]
fn divergence_restores_last_finite_weights() {
    let mut m = ModelGraph::new(&micro_config(), 2).unwrap();
    let before = m.clone();
    let data = Dataset {
        samples: vec![micro_sample(1)],
    };
    let cfg = TrainConfig {
        epochs: 1,
        lr: f64::INFINITY,
        grad_clip: None,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &data, &cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(m, before);
    assert!(train(&mut m, &Dataset { samples: vec![] }, &cfg, None).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = ModelGraph::new(&DetectorConfig::default(), 11).unwrap();
    m.set_stage_mask(2, vec![1, 4, 9]).unwrap();
    let bytes = encode_checkpoint(&m);
    let back = decode_checkpoint(&bytes, &m.head).unwrap();
    assert_eq!(back, m);
    assert_eq!(encode_checkpoint(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.lcpm");
    save_checkpoint(&m, &p).unwrap();
    assert_eq!(load_checkpoint(&p, &m.head).unwrap(), m);
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let m = ModelGraph::new(&micro_config(), 0).unwrap();
    let bytes = encode_checkpoint(&m);
    let offset = |b: &[u8]| match decode_checkpoint(b, &m.head).unwrap_err() {
        Error::Format { offset, .. } => offset,
        e => panic!("{e}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(&bad), 4);
    assert_eq!(offset(&bytes[..20]), 17);
    let mut bad = bytes.clone();
    bad[12] = 77;
    assert_eq!(offset(&bad), 12);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(offset(&long), bytes.len() as u64);
}
