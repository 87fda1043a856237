//! COCO-convention box and mask AP, independently implemented: greedy
//! score-ordered matching, 101-point interpolated precision, averaged over
//! IoU thresholds 0.50:0.05:0.95 and over classes that have ground truth.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, BinaryMask, CategoryMap, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{Detector, DetectorParams, InstancePrediction, PostprocessConfig};

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `|a ∧ b| / |a ∨ b|`, and 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "mask shapes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        log::warn!("mask IoU of two empty masks; reporting 0");
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// A scored prediction on image `image`. Equal scores are ordered by
/// `(image, id)`, so the result does not depend on input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored<T> {
    pub image: usize,
    pub id: usize,
    pub score: f64,
    pub item: T,
}

/// One prediction with its IoU against every ground truth of its image.
#[derive(Clone)]
struct Ranked {
    image: usize,
    id: usize,
    score: f64,
    ious: Vec<f64>,
}

fn ap_from_ranked(mut preds: Vec<Ranked>, gt_per_image: &[usize], threshold: f64) -> f64 {
    let n_gt: usize = gt_per_image.iter().sum();
    debug_assert!(n_gt > 0);
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.id.cmp(&b.id))
    });
    let mut taken: Vec<Vec<bool>> = gt_per_image.iter().map(|&n| vec![false; n]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(preds.len());
    let mut precision = Vec::with_capacity(preds.len());
    for (k, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &iou) in p.ious.iter().enumerate() {
            if taken[p.image][j] || iou < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[p.image][j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, non-increasing from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while i < recall.len() && recall[i] < level {
            i += 1;
        }
        if i < recall.len() {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold; `None` when there is no ground truth.
pub fn average_precision<P, G>(
    predictions: &[Scored<P>],
    ground_truths: &[Vec<G>],
    iou_threshold: f64,
    iou_fn: impl Fn(&P, &G) -> f64,
) -> Option<f64> {
    let gt_counts: Vec<usize> = ground_truths.iter().map(Vec::len).collect();
    if gt_counts.iter().sum::<usize>() == 0 {
        return None;
    }
    let ranked = predictions
        .iter()
        .map(|p| Ranked {
            image: p.image,
            id: p.id,
            score: p.score,
            ious: ground_truths[p.image].iter().map(|g| iou_fn(&p.item, g)).collect(),
        })
        .collect();
    Some(ap_from_ranked(ranked, &gt_counts, iou_threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    pub box_ap: f64,
    pub mask_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category_id: i64,
    pub name: String,
    pub num_gt: usize,
    pub box_ap: f64,
    pub mask_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map_box: f64,
    pub map_mask: f64,
    pub per_threshold: Vec<ThresholdAp>,
    pub per_class: Vec<ClassAp>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }
}

/// Scores predictions against the annotations of `records`;
/// `predictions[i]` belongs to `records[i]`.
pub fn evaluate_predictions(
    records: &[ImageRecord],
    predictions: &[Vec<InstancePrediction>],
    categories: &CategoryMap,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if records.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} records but {} prediction lists",
            records.len(),
            predictions.len()
        )));
    }
    let c = categories.len();
    // per class: ranked predictions with IoUs against that class's gts
    let mut box_ranked: Vec<Vec<Ranked>> = (0..c).map(|_| Vec::new()).collect();
    let mut mask_ranked: Vec<Vec<Ranked>> = (0..c).map(|_| Vec::new()).collect();
    let mut gt_counts = vec![vec![0usize; records.len()]; c];
    for (i, (rec, preds)) in records.iter().zip(predictions).enumerate() {
        for a in &rec.annotations {
            if a.category_id >= c {
                return Err(Error::Validation(format!(
                    "image {} has category {} outside the {c}-class map",
                    rec.id, a.category_id
                )));
            }
            gt_counts[a.category_id][i] += 1;
        }
        for (id, p) in preds.iter().enumerate() {
            if p.category_id >= c {
                return Err(Error::Contract(format!(
                    "prediction class {} outside the {c}-class map",
                    p.category_id
                )));
            }
            let gts = rec.annotations.iter().filter(|a| a.category_id == p.category_id);
            let mut bi = Vec::new();
            let mut mi = Vec::new();
            for g in gts {
                bi.push(box_iou(&p.bbox, &g.bbox));
                mi.push(mask_iou(&p.mask, &g.mask)?);
            }
            let score = p.cls_score as f64;
            box_ranked[p.category_id].push(Ranked { image: i, id, score, ious: bi });
            mask_ranked[p.category_id].push(Ranked { image: i, id, score, ious: mi });
        }
    }

    let thresholds = iou_thresholds();
    let valid: Vec<usize> = (0..c).filter(|&k| gt_counts[k].iter().sum::<usize>() > 0).collect();
    let mut class_box = vec![vec![0.0; thresholds.len()]; c];
    let mut class_mask = vec![vec![0.0; thresholds.len()]; c];
    for &k in &valid {
        for (t, &thr) in thresholds.iter().enumerate() {
            class_box[k][t] = ap_from_ranked(box_ranked[k].clone(), &gt_counts[k], thr);
            class_mask[k][t] = ap_from_ranked(mask_ranked[k].clone(), &gt_counts[k], thr);
        }
    }
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| {
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    };
    let per_threshold: Vec<ThresholdAp> = thresholds
        .iter()
        .enumerate()
        .map(|(t, &thr)| ThresholdAp {
            iou_threshold: (thr * 100.0).round() / 100.0,
            box_ap: mean(&mut valid.iter().map(|&k| class_box[k][t]), valid.len()),
            mask_ap: mean(&mut valid.iter().map(|&k| class_mask[k][t]), valid.len()),
        })
        .collect();
    let per_class = valid
        .iter()
        .map(|&k| ClassAp {
            category_id: categories.original(k),
            name: categories.names[k].clone(),
            num_gt: gt_counts[k].iter().sum(),
            box_ap: mean(&mut class_box[k].iter().copied(), thresholds.len()),
            mask_ap: mean(&mut class_mask[k].iter().copied(), thresholds.len()),
        })
        .collect();
    Ok(EvalResult {
        map_box: mean(&mut per_threshold.iter().map(|t| t.box_ap), per_threshold.len()),
        map_mask: mean(&mut per_threshold.iter().map(|t| t.mask_ap), per_threshold.len()),
        per_threshold,
        per_class,
        num_images: records.len(),
        num_gt: records.iter().map(|r| r.annotations.len()).sum(),
        num_predictions: predictions.iter().map(Vec::len).sum(),
    })
}

/// Inference over `records` in batches, then scoring.
pub fn evaluate(
    det: &Detector,
    params: &DetectorParams,
    records: &[ImageRecord],
    cfg: &PostprocessConfig,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(16) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        preds.extend(det.predict(params, &refs, cfg)?);
    }
    evaluate_predictions(records, &preds, &params.meta.categories)
}
