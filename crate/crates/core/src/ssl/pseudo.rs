use polite_nn::Graph;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, BinaryMask, GeometryLog, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, DetectionOutput, Detector, DetectorParams, PostprocessConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInstance {
    pub bbox: BBox,
    pub category_id: usize,
    pub cls_score: f32,
    pub mask: BinaryMask,
    pub mask_iou_score: f32,
    pub passed_cls: bool,
    pub passed_mask: bool,
}

/// Teacher output for one unlabelled image, in the geometry of its weak view.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub image_id: String,
    pub geometry: GeometryLog,
    /// Teacher detections above the score floor, before the class gate.
    pub num_candidates: usize,
    /// Only instances that passed the class gate are kept.
    pub instances: Vec<PseudoInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub tau_cls: f32,
    pub tau_iou: f32,
    pub images: Vec<PseudoLabels>,
}

/// Aggregate gate statistics of a pseudo-label set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub candidates: usize,
    pub passed_cls: usize,
    pub passed_mask: usize,
    /// Mean class score of the candidates that passed the class gate.
    pub mean_score: f64,
}

impl PseudoStats {
    pub fn cls_pass_rate(&self) -> Option<f64> {
        (self.candidates > 0).then(|| self.passed_cls as f64 / self.candidates as f64)
    }

    pub fn mask_pass_rate(&self) -> Option<f64> {
        (self.passed_cls > 0).then(|| self.passed_mask as f64 / self.passed_cls as f64)
    }

    pub fn merge(&mut self, other: &PseudoStats) {
        let total = self.passed_cls + other.passed_cls;
        if total > 0 {
            self.mean_score = (self.mean_score * self.passed_cls as f64
                + other.mean_score * other.passed_cls as f64)
                / total as f64;
        }
        self.candidates += other.candidates;
        self.passed_cls = total;
        self.passed_mask += other.passed_mask;
    }
}

impl PseudoLabelSet {
    pub fn stats(&self) -> PseudoStats {
        let scores: Vec<f64> = self
            .images
            .iter()
            .flat_map(|i| i.instances.iter().map(|p| p.cls_score as f64))
            .collect();
        PseudoStats {
            candidates: self.images.iter().map(|i| i.num_candidates).sum(),
            passed_cls: scores.len(),
            passed_mask: self
                .images
                .iter()
                .flat_map(|i| &i.instances)
                .filter(|p| p.passed_mask)
                .count(),
            mean_score: if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            },
        }
    }
}

/// Runs the teacher on weak views and stamps both gates. Instances failing
/// the class gate are dropped; those failing the mask gate are kept with
/// `passed_mask = false`.
pub fn generate_pseudo_labels(
    det: &Detector,
    teacher: &DetectorParams,
    weak_views: &[&ImageRecord],
    geometry: &[GeometryLog],
    tau_cls: f32,
    tau_iou: f32,
    pp: &PostprocessConfig,
) -> Result<PseudoLabelSet> {
    if weak_views.len() != geometry.len() {
        return Err(Error::Contract("one geometry log per view is required".into()));
    }
    for (name, t) in [("tau_cls", tau_cls), ("tau_iou", tau_iou)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("{name} must be in [0, 1], got {t}")));
        }
    }
    let mut set = PseudoLabelSet {
        tau_cls,
        tau_iou,
        images: Vec::with_capacity(weak_views.len()),
    };
    if weak_views.is_empty() {
        return Ok(set);
    }
    let mut g = Graph::inference(&teacher.store);
    let fwd = det.forward(&mut g, images_to_tensor(weak_views)?)?;
    let out = DetectionOutput::from_vars(&g, &fwd);
    let boxes = det.detect_boxes(&out, pp);
    let counts: Vec<usize> = boxes.iter().map(Vec::len).collect();
    let kept: Vec<Vec<_>> = boxes
        .into_iter()
        .map(|b| b.into_iter().filter(|c| c.score > tau_cls).collect())
        .collect();
    let preds = det.attach_masks(&mut g, &fwd, &kept, pp);
    for (((view, geo), n), preds) in weak_views.iter().zip(geometry).zip(counts).zip(preds) {
        set.images.push(PseudoLabels {
            image_id: view.id.clone(),
            geometry: *geo,
            num_candidates: n,
            instances: preds
                .into_iter()
                .map(|p| PseudoInstance {
                    bbox: p.bbox,
                    category_id: p.category_id,
                    cls_score: p.cls_score,
                    passed_cls: p.cls_score > tau_cls,
                    passed_mask: p.mask_iou_score > tau_iou,
                    mask_iou_score: p.mask_iou_score,
                    mask: p.mask,
                })
                .collect(),
        });
    }
    Ok(set)
}
