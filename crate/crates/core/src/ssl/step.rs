use polite_nn::{Gradients, Graph, Roi, Sgd, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::pseudo::PseudoLabels;
use super::schedule::TrainingSchedule;
use super::state::TeacherStudentState;
use crate::data::{AugmentationSpec, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::box_iou;
use crate::losses::{
    supervised_loss, unsupervised_loss, HeadGrads, LossBreakdown, LossConfig, LossWeights,
    MaskOutputs, SupImage, UnsupImage,
};
use crate::model::{images_to_tensor, select_class_probs, DetectionOutput, Detector, DetectorParams, PostprocessConfig};

/// Proposals must overlap a ground-truth box this much to train the mask branch.
const PROPOSAL_MATCH_IOU: f64 = 0.5;

/// Everything the training loops need besides data and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau_cls: f32,
    pub tau_iou: f32,
    pub ema_alpha: f64,
    pub weights: LossWeights,
    pub loss: LossConfig,
    /// Decoding used for evaluation and for mask-branch proposals.
    pub eval_pp: PostprocessConfig,
    /// Decoding used by the teacher when producing pseudo-labels.
    pub teacher_pp: PostprocessConfig,
    /// Predicted boxes per labelled image added to the mask-branch RoIs.
    pub proposals_per_image: usize,
    pub weak: AugmentationSpec,
    pub strong: AugmentationSpec,
    /// Feed labelled images to the student as strong views.
    pub sup_strong: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_cls", self.tau_cls), ("tau_iou", self.tau_iou)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config("ema_alpha must be in [0, 1)".into()));
        }
        if !(self.weights.lambda_unsup >= 0.0 && self.weights.lambda_unsup.is_finite()) {
            return Err(Error::Config("lambda must be finite and ≥ 0".into()));
        }
        self.eval_pp.validate()?;
        self.teacher_pp.validate()?;
        self.weak.validate()?;
        self.strong.validate()?;
        Ok(())
    }
}

/// An unlabelled image as the student sees it, with the teacher's labels.
#[derive(Clone, Debug)]
pub struct UnsupSample {
    pub strong: ImageRecord,
    pub labels: PseudoLabels,
}

#[derive(Debug)]
pub struct StepLosses {
    pub sup: LossBreakdown,
    pub unsup: LossBreakdown,
    pub grads: Gradients,
}

enum RoiSource {
    Sup { image: usize, gt: usize },
    Unsup { image: usize, instance: usize },
}

/// Forward pass, losses and backward pass for one batch. The unsupervised
/// branch is skipped entirely when λ = 0 or there are no unlabelled images.
pub fn compute_step(
    det: &Detector,
    params: &DetectorParams,
    sup: &[ImageRecord],
    unsup: &[UnsupSample],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let use_unsup = cfg.weights.lambda_unsup > 0.0 && !unsup.is_empty();
    let unsup = if use_unsup { unsup } else { &[] };
    let mut batch: Vec<&ImageRecord> = sup.iter().collect();
    batch.extend(unsup.iter().map(|u| &u.strong));
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut g = Graph::new(&params.store);
    let fwd = det.forward(&mut g, images_to_tensor(&batch)?)?;
    let out = DetectionOutput::from_vars(&g, &fwd);

    let mut rois = Vec::new();
    let mut sources = Vec::new();
    let push = |rois: &mut Vec<Roi>, n: usize, b: &crate::data::BBox| {
        rois.push(Roi {
            batch: n,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        })
    };
    let proposals = if cfg.proposals_per_image > 0 && !sup.is_empty() {
        det.detect_boxes(&out, &cfg.eval_pp)
    } else {
        Vec::new()
    };
    for (i, rec) in sup.iter().enumerate() {
        for (j, a) in rec.annotations.iter().enumerate() {
            push(&mut rois, i, &a.bbox);
            sources.push(RoiSource::Sup { image: i, gt: j });
        }
        let mut taken = 0;
        for c in proposals.get(i).into_iter().flatten() {
            if taken == cfg.proposals_per_image {
                break;
            }
            let best = rec
                .annotations
                .iter()
                .enumerate()
                .map(|(j, a)| (j, box_iou(&c.bbox, &a.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, iou)) = best {
                if iou >= PROPOSAL_MATCH_IOU {
                    push(&mut rois, i, &c.bbox);
                    sources.push(RoiSource::Sup { image: i, gt: j });
                    taken += 1;
                }
            }
        }
    }
    for (u, s) in unsup.iter().enumerate() {
        for (k, p) in s.labels.instances.iter().enumerate() {
            push(&mut rois, sup.len() + u, &p.bbox);
            sources.push(RoiSource::Unsup { image: u, instance: k });
        }
    }

    let mv = det.mask_head(&mut g, &fwd, &rois);
    let mut row_of = vec![0usize; rois.len()];
    let mut iou_var: Option<Var> = None;
    if let Some(mv) = &mv {
        for (row, &i) in mv.order.iter().enumerate() {
            row_of[i] = row;
        }
        if cfg.loss.use_maskiou {
            let classes: Vec<usize> = mv
                .order
                .iter()
                .map(|&i| match sources[i] {
                    RoiSource::Sup { image, gt } => sup[image].annotations[gt].category_id,
                    RoiSource::Unsup { image, instance } => {
                        unsup[image].labels.instances[instance].category_id
                    }
                })
                .collect();
            let probs = select_class_probs(g.value(mv.logits), &classes);
            iou_var = Some(det.maskiou_head(&mut g, mv.features, probs));
        }
    }

    let mut sup_images: Vec<SupImage> = sup
        .iter()
        .enumerate()
        .map(|(i, r)| SupImage {
            batch_index: i,
            record: r,
            rois: Vec::new(),
        })
        .collect();
    let mut unsup_images: Vec<UnsupImage> = unsup
        .iter()
        .enumerate()
        .map(|(u, s)| UnsupImage {
            batch_index: sup.len() + u,
            labels: &s.labels,
            rows: vec![None; s.labels.instances.len()],
        })
        .collect();
    for (i, src) in sources.iter().enumerate() {
        match *src {
            RoiSource::Sup { image, gt } => {
                let r = &rois[i];
                let b = crate::data::BBox::new(r.x1, r.y1, r.x2, r.y2);
                sup_images[image].rois.push((row_of[i], b, gt));
            }
            RoiSource::Unsup { image, instance } => {
                unsup_images[image].rows[instance] = Some(row_of[i]);
            }
        }
    }

    let mask_out = mv.as_ref().map(|m| MaskOutputs {
        logits: g.value(m.logits),
        iou: iou_var.map(|v| g.value(v)),
    });
    let pyramid = &det.config.pyramid;
    let (sup_bd, mut grads) = if sup.is_empty() {
        (LossBreakdown::default(), HeadGrads::zeros(&out, mask_out.as_ref()))
    } else {
        supervised_loss(&out, mask_out.as_ref(), &sup_images, pyramid, &cfg.loss)?
    };
    let unsup_bd = if use_unsup {
        let (bd, ug) = unsupervised_loss(
            &out,
            mask_out.as_ref(),
            &unsup_images,
            cfg.tau_cls as f64,
            cfg.tau_iou as f64,
            pyramid,
            &cfg.loss,
        )?;
        grads.add_scaled(&ug, cfg.weights.lambda_unsup as f32);
        bd
    } else {
        LossBreakdown::default()
    };

    let mut seeds: Vec<(Var, Tensor)> = Vec::new();
    for (l, lv) in fwd.levels.iter().enumerate() {
        seeds.push((lv.cls, grads.cls[l].clone()));
        seeds.push((lv.reg, grads.reg[l].clone()));
        seeds.push((lv.ctr, grads.ctr[l].clone()));
    }
    if let (Some(m), Some(gm)) = (&mv, grads.mask_logits.take()) {
        seeds.push((m.logits, gm));
    }
    if let (Some(v), Some(gi)) = (iou_var, grads.mask_iou.take()) {
        seeds.push((v, gi));
    }
    let grads = g.backward(seeds);
    Ok(StepLosses {
        sup: sup_bd,
        unsup: unsup_bd,
        grads,
    })
}

fn check_step(step: usize, losses: &StepLosses, ids: &[&str]) -> Result<()> {
    if losses.sup.all_finite() && losses.unsup.all_finite() && losses.grads.all_finite() {
        return Ok(());
    }
    Err(Error::Divergence {
        step,
        detail: format!(
            "non-finite loss or gradient; sup {:?}, unsup {:?}, batch {:?}",
            losses.sup, losses.unsup, ids
        ),
    })
}

/// One supervised-only SGD step on `params`.
pub fn supervised_step(
    det: &Detector,
    params: &mut DetectorParams,
    optimizer: &mut Sgd,
    views: &[ImageRecord],
    lr: f64,
    step: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let losses = compute_step(det, params, views, &[], cfg)?;
    let ids: Vec<&str> = views.iter().map(|v| v.id.as_str()).collect();
    check_step(step, &losses, &ids)?;
    optimizer.step(&mut params.store, &losses.grads, lr as f32);
    Ok(losses.sup)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub sup: LossBreakdown,
    pub unsup: LossBreakdown,
    pub total: f64,
}

/// SGD on `L_sup + λ L_unsup` for the student, then one EMA update of the
/// teacher. Pseudo-labels in `unsup` must come from the current teacher.
pub fn student_step(
    det: &Detector,
    state: &mut TeacherStudentState,
    sup: &[ImageRecord],
    unsup: &[UnsupSample],
    schedule: &TrainingSchedule,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let lr = schedule.lr_at(state.step);
    let losses = compute_step(det, &state.student, sup, unsup, cfg)?;
    let ids: Vec<&str> = sup
        .iter()
        .map(|v| v.id.as_str())
        .chain(unsup.iter().map(|u| u.strong.id.as_str()))
        .collect();
    check_step(state.step, &losses, &ids)?;
    state
        .optimizer
        .step(&mut state.student.store, &losses.grads, lr as f32);
    state.ema_update()?;
    let report = StepReport {
        step: state.step,
        lr,
        total: crate::losses::total_loss(&losses.sup, &losses.unsup, &cfg.weights),
        sup: losses.sup,
        unsup: losses.unsup,
    };
    state.step += 1;
    Ok(report)
}
