use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    channel_importance, joint_loss, keep_count, reconstruction_loss_from_output, refine_selected, select_channels,
    GradientLedger, LedgerRow, PruneConfig, PruneMask,
};
use crate::autodiff::Tape;
use crate::data::{Dataset, Sample};
use crate::detector::{
    add_channel_bias, batch_gradients, detection_loss, match_anchors, train, ImageTargets, ModelGraph, Sgd,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxCoder};
use crate::rng::rng_for;
use crate::roi::{aux_losses, AuxHead, AuxHeadVars, AuxPositive, RoiSampling};
use crate::tensor::Tensor;

/// First record of a pruning report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub record: String,
    pub mode: String,
    pub config: PruneConfig,
}

/// One record per pruned layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub record: String,
    pub layer: usize,
    pub channels: usize,
    pub k: usize,
    pub retained: Vec<usize>,
    /// Shares of `L_re`, `alpha * L_ac`, `alpha * L_ar` in percent.
    pub percentages: [f64; 3],
    /// Mean fine-tune loss `L_f` over the last fine-tune epoch.
    pub finetune_loss: Option<f64>,
    /// Joint loss over the scoring set around refinement.
    pub joint_loss_pre: f64,
    pub joint_loss_post: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub masks: Vec<PruneMask>,
    pub ledger: GradientLedger,
    pub header: ReportHeader,
    pub layers: Vec<LayerReport>,
}

impl PruneOutcome {
    /// Line-delimited JSON: the header, then one record per layer.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for l in &self.layers {
            s.push_str(&serde_json::to_string(l)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Precomputed per-image inputs of the scoring pass for one layer.
struct ScoringItem {
    /// Pruned model's layer-l output.
    x: Tensor,
    /// Original model's layer-(l+1) convolution output.
    f: Tensor,
    positives: Vec<AuxPositive>,
}

/// What the scoring pass of one stage needs besides the filter itself.
struct StageContext<'a> {
    stride: usize,
    bias: &'a Tensor,
    relu: bool,
    aux: &'a AuxHead,
    sampling: RoiSampling,
    cfg: &'a PruneConfig,
    coder: BoxCoder,
}

/// Component values of one image's joint loss.
#[derive(Clone, Copy, Debug, Default)]
struct JointValues {
    reconstruction: f64,
    classification: f64,
    regression: f64,
}

impl JointValues {
    fn joint(&self, alpha: f64) -> f64 {
        self.reconstruction + alpha * (self.classification + self.regression)
    }
}

/// Build the joint loss for one image; `batch` divides `L_re` so that a
/// batch's reconstruction term is normalised by its total element count.
fn joint_terms(
    tape: &mut Tape,
    ctx: &StageContext,
    item: &ScoringItem,
    w: crate::autodiff::Var,
    batch: usize,
) -> Result<(crate::autodiff::Var, Option<crate::roi::AuxLosses>)> {
    let x = tape.constant(item.x.clone());
    let f = tape.constant(item.f.clone());
    let pred = tape.conv2d(x, w, None, ctx.stride, 1)?;
    let l_re = reconstruction_loss_from_output(tape, f, pred)?;
    let l_re = tape.mul_scalar(l_re, 1.0 / batch as f64);
    if ctx.cfg.alpha == 0.0 {
        return Ok((l_re, None));
    }
    let bias = tape.constant(ctx.bias.clone());
    let mut feat = add_channel_bias(tape, pred, bias)?;
    if ctx.relu {
        feat = tape.relu(feat);
    }
    let head = ctx.aux.bind(tape, false);
    let aux = aux_losses(
        tape,
        feat,
        &item.positives,
        &head,
        &ctx.sampling,
        ctx.cfg.match_threshold,
        ctx.cfg.m,
        &ctx.coder,
    )?;
    Ok((l_re, aux))
}

/// Gradients of one image's joint loss (scaled by `scale`) and, when
/// `components` is set, of `L_re`, `alpha * L_ac` and `alpha * L_ar` alone.
fn scoring_gradients(
    ctx: &StageContext,
    item: &ScoringItem,
    w: &Tensor,
    batch: usize,
    scale: f64,
    components: bool,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let (l_re, aux) = joint_terms(&mut tape, ctx, item, wv, batch)?;
    let total = joint_loss(&mut tape, l_re, aux.map(|a| a.total), ctx.cfg.alpha)?;
    let scaled = tape.mul_scalar(total, scale);
    let values = JointValues {
        reconstruction: tape.value(l_re).data()[0],
        classification: aux.map_or(0.0, |a| tape.value(a.classification).data()[0]),
        regression: aux.map_or(0.0, |a| tape.value(a.regression).data()[0]),
    };
    let stats = vec![values.reconstruction, values.classification, values.regression];
    let mut grads = Vec::with_capacity(4);
    tape.backward(scaled)?;
    grads.push(tape.take_grad(wv).expect("leaf"));
    if components {
        let alpha = ctx.cfg.alpha;
        let zero = Tensor::zeros(w.shape());
        tape.reset_grads();
        tape.backward(l_re)?;
        grads.push(tape.take_grad(wv).expect("leaf"));
        for part in [aux.map(|a| a.classification), aux.map(|a| a.regression)] {
            match part {
                Some(v) => {
                    tape.reset_grads();
                    let weighted = tape.mul_scalar(v, alpha);
                    tape.backward(weighted)?;
                    grads.push(tape.take_grad(wv).expect("leaf"));
                }
                None => grads.push(zero.clone()),
            }
        }
    }
    Ok((stats, grads))
}

/// Joint loss of the whole scoring set at weights `w` (sum over batches).
fn scoring_loss(ctx: &StageContext, batches: &[Vec<ScoringItem>], w: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let n = batch.len();
        let vals = crate::exec::map_ordered(batch, |item| -> Result<JointValues> {
            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let (l_re, aux) = joint_terms(&mut tape, ctx, item, wv, n)?;
            Ok(JointValues {
                reconstruction: tape.value(l_re).data()[0],
                classification: aux.map_or(0.0, |a| tape.value(a.classification).data()[0]),
                regression: aux.map_or(0.0, |a| tape.value(a.regression).data()[0]),
            })
        });
        for v in vals {
            total += v?.joint(ctx.cfg.alpha);
        }
    }
    Ok(total)
}

fn aux_positives(anchors: &[BBox], sample: &Sample, targets: &ImageTargets) -> Vec<AuxPositive> {
    targets
        .positives
        .iter()
        .map(|&(a, g)| AuxPositive {
            default_box: anchors[a],
            gt_box: sample.boxes[g],
            class: sample.labels[g],
        })
        .collect()
}

/// One fine-tune image: gradients of `scale * (L_a + L_c + L_r)` w.r.t.
/// every model layer followed by the four aux-head tensors.
#[allow(clippy::too_many_arguments)]
fn finetune_gradient(
    model: &ModelGraph,
    aux: &AuxHead,
    feature_layer: usize,
    sampling: &RoiSampling,
    anchors: &[BBox],
    sample: &Sample,
    targets: &ImageTargets,
    scale: f64,
    cfg: &PruneConfig,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, |_| true);
    let head: AuxHeadVars = aux.bind(&mut tape, true);
    let x = tape.constant(sample.image.clone());
    let pass = model.forward(&mut tape, &params, x)?;
    let det = detection_loss(
        &mut tape,
        pass.logits,
        pass.offsets,
        anchors,
        targets,
        &sample.labels,
        &sample.boxes,
        cfg.m,
        3,
        &model.coder,
    )?;
    let positives = aux_positives(anchors, sample, targets);
    let aux_l = aux_losses(
        &mut tape,
        pass.layer_outputs[feature_layer],
        &positives,
        &head,
        sampling,
        cfg.match_threshold,
        cfg.m,
        &model.coder,
    )?;
    let total = match aux_l {
        Some(a) => tape.add(det.total, a.total)?,
        None => det.total,
    };
    let scaled = tape.mul_scalar(total, scale);
    tape.backward(scaled)?;
    let mut grads: Vec<Tensor> = params
        .iter()
        .zip(&model.layers)
        .map(|(&p, l)| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(l.weight.shape())))
        .collect();
    for v in head.as_array() {
        grads.push(tape.take_grad(v).expect("aux leaf"));
    }
    Ok((vec![tape.value(scaled).data()[0]], grads))
}

/// Fine-tune `model` and `aux` jointly under `L_f = L_a + L_c + L_r`;
/// returns the mean batch loss of the last epoch.
#[allow(clippy::too_many_arguments)]
fn finetune_stage(
    model: &mut ModelGraph,
    aux: &mut AuxHead,
    feature_layer: usize,
    sampling: &RoiSampling,
    data: &Dataset,
    targets: &[ImageTargets],
    stage: usize,
    cfg: &PruneConfig,
) -> Result<Option<f64>> {
    let epochs = cfg.finetune_epochs_per_layer;
    if epochs == 0 {
        return Ok(None);
    }
    let anchors = model.default_boxes();
    let mut rng = rng_for(cfg.seed, &format!("finetune-{stage}"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(cfg.finetune_lr, 0.9, 0.0);
    let mut last = None;
    for epoch in 0..epochs {
        opt.lr = if epoch >= epochs.div_ceil(2) && epochs > 1 {
            cfg.finetune_lr * 0.1
        } else {
            cfg.finetune_lr
        };
        order.shuffle(&mut rng);
        let take = cfg.finetune_images.unwrap_or(order.len()).min(order.len());
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order[..take].chunks(cfg.finetune_batch_size) {
            let npos: usize = chunk.iter().map(|&i| targets[i].num_positives()).sum();
            let scale = 1.0 / npos.max(1) as f64;
            let (m, a): (&ModelGraph, &AuxHead) = (model, aux);
            let (stats, mut grads) = batch_gradients(chunk, |&i| {
                finetune_gradient(m, a, feature_layer, sampling, &anchors, &data.samples[i], &targets[i], scale, cfg)
            })?;
            if !stats[0].is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("fine-tune loss diverged at layer {stage}")));
            }
            let aux_grads = grads.split_off(model.layers.len());
            model.mask_gradients(&mut grads)?;
            grads.extend(aux_grads);
            let mut params: Vec<&mut Tensor> = model.layers.iter_mut().map(|l| &mut l.weight).collect();
            params.extend(aux.params_mut());
            opt.step(params, &grads)?;
            model.apply_masks()?;
            sum += stats[0];
            batches += 1;
        }
        last = Some(sum / batches.max(1) as f64);
    }
    Ok(last)
}

/// Prune every backbone stage of `model` in place, shallow to deep.
///
/// `original` is the frozen unpruned model providing reconstruction
/// targets. `on_layer` sees each layer record as soon as it is final. On
/// error `model` holds the state after the last completed layer.
pub fn prune_model(
    model: &mut ModelGraph,
    original: &ModelGraph,
    data: &Dataset,
    cfg: &PruneConfig,
    mut on_layer: impl FnMut(&LayerReport, &ModelGraph),
) -> Result<PruneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("pruning dataset is empty".into()));
    }
    if original.layers.len() != model.layers.len()
        || original.layers.iter().zip(&model.layers).any(|(a, b)| a.weight.shape() != b.weight.shape())
    {
        return Err(Error::InvalidArgument("original and pruned model differ in structure".into()));
    }
    let anchors = model.default_boxes();
    let targets: Vec<ImageTargets> = data
        .samples
        .iter()
        .map(|s| match_anchors(&anchors, &s.boxes, cfg.match_threshold))
        .collect();
    let mut scoring_order: Vec<usize> = (0..data.len()).collect();
    scoring_order.shuffle(&mut rng_for(cfg.seed, "scoring-set"));
    let scoring_ids: Vec<Vec<usize>> = scoring_order
        .chunks(cfg.scoring_batch_size)
        .take(cfg.scoring_batches)
        .map(<[usize]>::to_vec)
        .collect();

    let header = ReportHeader {
        record: "header".into(),
        mode: cfg.mode().into(),
        config: cfg.clone(),
    };
    let stages = model.stages()?;
    let mut masks = Vec::new();
    let mut ledger = GradientLedger::default();
    let mut reports = Vec::new();
    for l in model.prunable_stages()? {
        let consistent = model.clone();
        let result = prune_stage(
            model,
            original,
            data,
            cfg,
            &targets,
            &scoring_ids,
            l,
            &stages,
        );
        match result {
            Ok((mask, row, report)) => {
                on_layer(&report, model);
                masks.push(mask);
                ledger.layers.push(row);
                reports.push(report);
            }
            Err(e) => {
                *model = consistent;
                return Err(e);
            }
        }
    }
    if cfg.final_finetune_epochs > 0 {
        let tc = TrainConfig {
            epochs: cfg.final_finetune_epochs,
            lr: cfg.finetune_lr,
            lr_milestones: vec![cfg.final_finetune_epochs.div_ceil(2)],
            m: cfg.m,
            match_threshold: cfg.match_threshold,
            seed: crate::rng::derive_seed(cfg.seed, "final-finetune"),
            ..TrainConfig::default()
        };
        train(model, data, &tc, None)?;
    }
    Ok(PruneOutcome {
        masks,
        ledger,
        header,
        layers: reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn prune_stage(
    model: &mut ModelGraph,
    original: &ModelGraph,
    data: &Dataset,
    cfg: &PruneConfig,
    targets: &[ImageTargets],
    scoring_ids: &[Vec<usize>],
    l: usize,
    stages: &[crate::detector::Stage],
) -> Result<(PruneMask, LedgerRow, LayerReport)> {
    let (cur, next) = (stages[l], stages[l + 1]);
    let sampling = RoiSampling::standard(1.0 / model.stage_stride(l + 1)? as f64);
    let next_channels = model.stage_channels(l + 1)?;
    let mut aux = AuxHead::new(
        next_channels,
        model.num_classes,
        &sampling,
        &mut rng_for(cfg.seed, &format!("aux-head-{l}")),
    );

    // 1. Fine-tune the pruned model together with a fresh auxiliary head.
    let finetune_loss = finetune_stage(model, &mut aux, next.output(), &sampling, data, targets, l, cfg)?;

    // 2. Accumulate joint-loss gradients on the next stage's filter.
    let anchors = model.default_boxes();
    let stride = match model.layers[next.conv].kind {
        crate::detector::LayerKind::Conv { stride } => stride,
        _ => 1,
    };
    let batches: Vec<Vec<ScoringItem>> = scoring_ids
        .iter()
        .map(|ids| {
            let items = crate::exec::map_ordered(ids, |&i| -> Result<ScoringItem> {
                let s = &data.samples[i];
                Ok(ScoringItem {
                    x: model.layer_output(&s.image, cur.output())?,
                    f: original.layer_output(&s.image, next.conv)?,
                    positives: aux_positives(&anchors, s, &targets[i]),
                })
            });
            items.into_iter().collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let bias = model.layers[next.bias].weight.clone();
    let ctx = StageContext {
        stride,
        bias: &bias,
        relu: next.relu.is_some(),
        aux: &aux,
        sampling,
        cfg,
        coder: model.coder,
    };
    let w = model.layers[next.conv].weight.clone();
    let mut sums: Vec<Tensor> = vec![Tensor::zeros(w.shape()); 4];
    for batch in &batches {
        let n = batch.len();
        let (_, g) = batch_gradients(batch, |item| scoring_gradients(&ctx, item, &w, n, cfg.loss_scale, true))?;
        for (s, gi) in sums.iter_mut().zip(&g) {
            s.axpy(1.0, gi)?;
        }
    }
    let mass = |t: &Tensor| -> Result<f64> { Ok(channel_importance(t)?.iter().sum()) };
    let row = LedgerRow {
        layer: l,
        reconstruction: mass(&sums[1])?,
        classification: mass(&sums[2])?,
        regression: mass(&sums[3])?,
    };

    // 3. Keep the K most important channels.
    let channels = model.stage_channels(l)?;
    let k = keep_count(channels, cfg.eta);
    let scores = channel_importance(&sums[0])?;
    let mask = select_channels(&scores, k, l)?;
    model.set_stage_mask(l, mask.retained.clone())?;

    // 4. Refine the retained slices of the next filter by SGD.
    let masked = model.layers[next.conv].weight.clone();
    let pre = scoring_loss(&ctx, &batches, &masked)?;
    let refined = refine_selected(&masked, &mask, cfg.gamma, batches.len(), |step, w| {
        let n = batches[step].len();
        let (_, g) = batch_gradients(&batches[step], |item| scoring_gradients(&ctx, item, w, n, 1.0, false))?;
        Ok(g.into_iter().next().expect("joint gradient"))
    })?;
    let post = scoring_loss(&ctx, &batches, &refined)?;
    if !pre.is_finite() || !post.is_finite() {
        return Err(Error::NonFinite(format!("joint loss at layer {l}: {pre} -> {post}")));
    }
    model.layers[next.conv].weight = refined;
    model.apply_masks()?;

    let report = LayerReport {
        record: "layer".into(),
        layer: l,
        channels,
        k,
        retained: mask.retained.clone(),
        percentages: row.percentages(),
        finetune_loss,
        joint_loss_pre: pre,
        joint_loss_post: post,
    };
    Ok((mask, row, report))
}
