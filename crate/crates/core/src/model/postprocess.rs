use polite_nn::{Graph, Roi, Tensor};
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, DetectionOutput, Detector, DetectorParams, ForwardVars, LevelOutput};
use crate::data::{BBox, BinaryMask, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::box_iou;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_floor: f32,
    pub nms_iou: f32,
    pub max_dets: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
    /// Rank by `sqrt(σ(cls) · σ(centreness))` rather than `σ(cls)` alone.
    pub score_fusion: bool,
    pub mask_threshold: f32,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.05,
            nms_iou: 0.6,
            max_dets: 20,
            pre_nms_top_k: 200,
            score_fusion: true,
            mask_threshold: 0.5,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_floor", self.score_floor),
            ("nms_iou", self.nms_iou),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.max_dets == 0 {
            return Err(Error::Config("max_dets must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A decoded box before the mask branch runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub class: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub bbox: BBox,
    pub category_id: usize,
    pub cls_score: f32,
    pub mask_iou_score: f32,
    /// RoI-local `R × R` mask probabilities for the predicted class.
    pub mask_probs: Vec<f32>,
    /// Binarised mask pasted into image coordinates.
    pub mask: BinaryMask,
}

/// Inverse of the (l, t, r, b) encoding at location `(x, y)`.
pub fn decode_box(x: f32, y: f32, ltrb: [f32; 4]) -> BBox {
    BBox::new(x - ltrb[0], y - ltrb[1], x + ltrb[2], y + ltrb[3])
}

fn sigmoid(x: f32) -> f32 {
    polite_nn::ops::sigmoid(x)
}

/// Candidates of image `n` above the score floor on one level, at most
/// `pre_nms_top_k` of them.
pub fn decode_level(
    out: &LevelOutput,
    n: usize,
    image_size: (usize, usize),
    cfg: &PostprocessConfig,
) -> Vec<Candidate> {
    let (_, c, h, w) = out.cls_logits.dims4();
    let hw = h * w;
    let cls = &out.cls_logits.data()[n * c * hw..(n + 1) * c * hw];
    let reg = &out.box_reg.data()[n * 4 * hw..(n + 1) * 4 * hw];
    let ctr = &out.centreness_logits.data()[n * hw..(n + 1) * hw];
    let s = out.stride;
    let mut cands = Vec::new();
    for idx in 0..hw {
        let ctr_p = sigmoid(ctr[idx]);
        for k in 0..c {
            let p = sigmoid(cls[k * hw + idx]);
            let score = if cfg.score_fusion { (p * ctr_p).sqrt() } else { p };
            if score <= cfg.score_floor {
                continue;
            }
            let (x, y) = ((s / 2 + (idx % w) * s) as f32, (s / 2 + (idx / w) * s) as f32);
            let ltrb = [reg[idx], reg[hw + idx], reg[2 * hw + idx], reg[3 * hw + idx]];
            let bbox = decode_box(x, y, ltrb).clip(image_size.0, image_size.1);
            if bbox.is_valid() {
                cands.push(Candidate {
                    bbox,
                    class: k,
                    score,
                });
            }
        }
    }
    sort_by_score(&mut cands);
    cands.truncate(cfg.pre_nms_top_k);
    cands
}

/// Descending score; ties keep their input order.
fn sort_by_score(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy per-class non-maximum suppression, keeping the best `max_dets`.
pub fn nms_classwise(mut cands: Vec<Candidate>, iou: f32, max_dets: usize) -> Vec<Candidate> {
    sort_by_score(&mut cands);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.len() == max_dets {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class == c.class && box_iou(&k.bbox, &c.bbox) > iou as f64);
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// Bilinear upsampling of an `r × r` RoI map into image pixels whose centre
/// lies inside `bbox`; zero elsewhere.
pub fn paste_mask(probs: &[f32], r: usize, bbox: &BBox, width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; width * height];
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let x0 = (bbox.x1 - 0.5).ceil().max(0.0) as usize;
    let y0 = (bbox.y1 - 0.5).ceil().max(0.0) as usize;
    let x1 = ((bbox.x2 - 0.5).ceil().max(0.0) as usize).min(width);
    let y1 = ((bbox.y2 - 0.5).ceil().max(0.0) as usize).min(height);
    let top = (r - 1) as f32;
    for py in y0..y1 {
        let v = (((py as f32 + 0.5 - bbox.y1) / bh) * r as f32 - 0.5).clamp(0.0, top);
        let (v0, fv) = (v.floor() as usize, v.fract());
        let v1 = (v0 + 1).min(r - 1);
        for px in x0..x1 {
            let u = (((px as f32 + 0.5 - bbox.x1) / bw) * r as f32 - 0.5).clamp(0.0, top);
            let (u0, fu) = (u.floor() as usize, u.fract());
            let u1 = (u0 + 1).min(r - 1);
            let a = probs[v0 * r + u0] * (1.0 - fu) + probs[v0 * r + u1] * fu;
            let b = probs[v1 * r + u0] * (1.0 - fu) + probs[v1 * r + u1] * fu;
            out[py * width + px] = a * (1.0 - fv) + b * fv;
        }
    }
    out
}

/// Nearest-pixel sample of `mask` at the centres of an `r × r` grid over `bbox`.
pub fn sample_mask_on_grid(mask: &BinaryMask, bbox: &BBox, r: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * r];
    let (sx, sy) = (bbox.width() / r as f32, bbox.height() / r as f32);
    for j in 0..r {
        let y = bbox.y1 + (j as f32 + 0.5) * sy;
        if y < 0.0 || y >= mask.height as f32 {
            continue;
        }
        for i in 0..r {
            let x = bbox.x1 + (i as f32 + 0.5) * sx;
            if x < 0.0 || x >= mask.width as f32 {
                continue;
            }
            out[j * r + i] = mask.get(x as usize, y as usize) as u8 as f32;
        }
    }
    out
}

pub fn binarize_mask(probs: &[f32], width: usize, height: usize, threshold: f32) -> BinaryMask {
    BinaryMask {
        width,
        height,
        data: probs.iter().map(|&p| (p >= threshold) as u8).collect(),
    }
}

/// Class-selected mask probabilities `[K, 1, R, R]` from `[K, C, R, R]` logits.
pub(crate) fn select_class_probs(logits: &Tensor, classes: &[usize]) -> Tensor {
    let (k, c, r, _) = logits.dims4();
    let rr = r * r;
    let mut out = Vec::with_capacity(k * rr);
    for (i, &cls) in classes.iter().enumerate() {
        let base = (i * c + cls) * rr;
        out.extend(logits.data()[base..base + rr].iter().map(|&z| sigmoid(z)));
    }
    Tensor::new(vec![k, 1, r, r], out)
}

impl Detector {
    /// Dense decoding and NMS for every image of the batch.
    pub fn detect_boxes(&self, out: &DetectionOutput, cfg: &PostprocessConfig) -> Vec<Vec<Candidate>> {
        let n = out.levels.first().map_or(0, |l| l.cls_logits.dims4().0);
        (0..n)
            .map(|i| {
                let cands: Vec<Candidate> = out
                    .levels
                    .iter()
                    .flat_map(|l| decode_level(l, i, out.image_size, cfg))
                    .collect();
                nms_classwise(cands, cfg.nms_iou, cfg.max_dets)
            })
            .collect()
    }

    /// Runs the mask and mask-IoU heads on the given boxes.
    pub fn attach_masks(
        &self,
        g: &mut Graph,
        fwd: &ForwardVars,
        boxes: &[Vec<Candidate>],
        cfg: &PostprocessConfig,
    ) -> Vec<Vec<InstancePrediction>> {
        let mut rois = Vec::new();
        let mut owner = Vec::new();
        for (n, cands) in boxes.iter().enumerate() {
            for (j, c) in cands.iter().enumerate() {
                rois.push(Roi {
                    batch: n,
                    x1: c.bbox.x1,
                    y1: c.bbox.y1,
                    x2: c.bbox.x2,
                    y2: c.bbox.y2,
                });
                owner.push((n, j));
            }
        }
        let mut result: Vec<Vec<InstancePrediction>> = boxes.iter().map(|_| Vec::new()).collect();
        let Some(mv) = self.mask_head(g, fwd, &rois) else {
            return result;
        };
        let classes: Vec<usize> = mv.order.iter().map(|&i| boxes[owner[i].0][owner[i].1].class).collect();
        let probs = select_class_probs(g.value(mv.logits), &classes);
        let iou = self.maskiou_head(g, mv.features, probs.clone());
        let iou = g.value(iou);
        let c = self.num_classes();
        let r = self.mask_resolution();
        let rr = r * r;
        let (w, h) = fwd.image_size;
        let mut rows: Vec<(usize, usize, InstancePrediction)> = Vec::new();
        for (row, &i) in mv.order.iter().enumerate() {
            let (n, j) = owner[i];
            let cand = boxes[n][j];
            let mp = probs.data()[row * rr..(row + 1) * rr].to_vec();
            let pasted = paste_mask(&mp, r, &cand.bbox, w, h);
            rows.push((
                n,
                j,
                InstancePrediction {
                    bbox: cand.bbox,
                    category_id: cand.class,
                    cls_score: cand.score,
                    mask_iou_score: iou.data()[row * c + cand.class],
                    mask_probs: mp,
                    mask: binarize_mask(&pasted, w, h, cfg.mask_threshold),
                },
            ));
        }
        rows.sort_by_key(|(n, j, _)| (*n, *j));
        for (n, _, p) in rows {
            result[n].push(p);
        }
        result
    }

    /// Full inference on a batch of equally sized images.
    pub fn predict(
        &self,
        params: &DetectorParams,
        images: &[&ImageRecord],
        cfg: &PostprocessConfig,
    ) -> Result<Vec<Vec<InstancePrediction>>> {
        let mut g = Graph::inference(&params.store);
        let fwd = self.forward(&mut g, images_to_tensor(images)?)?;
        let out = DetectionOutput::from_vars(&g, &fwd);
        let boxes = self.detect_boxes(&out, cfg);
        Ok(self.attach_masks(&mut g, &fwd, &boxes, cfg))
    }
}
