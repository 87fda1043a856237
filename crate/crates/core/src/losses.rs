//! Loss terms with analytic gradients, evaluated in f64 outside the graph.
//!
//! Each primitive returns its value and the gradient with respect to its
//! first argument. The composite losses gather head outputs into flat
//! arrays, call the primitives and scatter the gradients back into
//! [`HeadGrads`], which seed the backward pass.

use polite_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, BinaryMask, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::mask_iou;
use crate::model::{binarize_mask, paste_mask, sample_mask_on_grid, DetectionOutput};
use crate::ssl::PseudoLabels;
use crate::targets::{assign_locations, LevelTargets, PyramidSpec, TargetBox};

/// A scalar loss and its gradient with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {name}")))
    }
}

/// Sigmoid focal loss summed over elements, with `targets` in {0, 1}.
/// `alpha = None` weighs both classes equally; with `gamma = 0` this is BCE.
pub fn focal_loss_sum(
    logits: &[f64],
    targets: &[f64],
    alpha: Option<f64>,
    gamma: f64,
) -> Result<LossTerm> {
    check_finite("classification logits", logits)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        let p = sigmoid(z);
        if y > 0.5 {
            let a = alpha.unwrap_or(1.0);
            let log_p = -softplus(-z);
            let m = (1.0 - p).powf(gamma);
            value += -a * m * log_p;
            grad.push(a * m * (gamma * p * log_p - (1.0 - p)));
        } else {
            let a = alpha.map_or(1.0, |a| 1.0 - a);
            let log_q = -softplus(z);
            let m = p.powf(gamma);
            value += -a * m * log_q;
            grad.push(-a * m * (gamma * (1.0 - p) * log_q - p));
        }
    }
    Ok(LossTerm { value, grad })
}

/// Focal loss over `N` locations × `C` classes, normalised by the number of
/// foreground locations (at least 1).
pub fn focal_loss(
    logits: &[f64],
    num_classes: usize,
    class_targets: &[Option<usize>],
    alpha: Option<f64>,
    gamma: f64,
) -> Result<LossTerm> {
    if logits.len() != class_targets.len() * num_classes {
        return Err(Error::Contract(format!(
            "{} logits for {} locations × {num_classes} classes",
            logits.len(),
            class_targets.len()
        )));
    }
    let mut targets = vec![0.0; logits.len()];
    for (i, t) in class_targets.iter().enumerate() {
        if let Some(k) = t {
            targets[i * num_classes + k] = 1.0;
        }
    }
    let fg = class_targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut term = focal_loss_sum(logits, &targets, alpha, gamma)?;
    term.value /= fg;
    term.grad.iter_mut().for_each(|g| *g /= fg);
    Ok(term)
}

/// `−ln IoU` of two (l, t, r, b) boxes sharing an anchor point, with its
/// gradient with respect to `pred`.
pub fn iou_loss_single(pred: [f64; 4], target: [f64; 4]) -> Result<(f64, [f64; 4])> {
    if !pred.iter().chain(&target).all(|&d| d > 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!(
            "IoU loss needs positive distances, got {pred:?} vs {target:?}"
        )));
    }
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let ap = (l + r) * (t + b);
    let at = (lt + rt) * (tt + bt);
    let wi = l.min(lt) + r.min(rt);
    let hi = t.min(tt) + b.min(bt);
    let inter = wi * hi;
    let union = ap + at - inter;
    let value = -(inter / union).ln();
    // d(inter)/d(pred): only the smaller side of each min moves
    let di = [
        if l <= lt { hi } else { 0.0 },
        if t <= tt { wi } else { 0.0 },
        if r <= rt { hi } else { 0.0 },
        if b <= bt { wi } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = -di[k] / inter + (dap[k] - di[k]) / union;
    }
    Ok((value, g))
}

/// Weighted mean of [`iou_loss_single`] over locations; `None` when empty.
/// Without weights every location counts once.
pub fn iou_loss(
    pred: &[[f64; 4]],
    target: &[[f64; 4]],
    weights: Option<&[f64]>,
) -> Result<Option<LossTerm>> {
    if pred.len() != target.len() {
        return Err(Error::Contract("prediction/target count mismatch".into()));
    }
    if pred.is_empty() {
        return Ok(None);
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let norm: f64 = (0..pred.len()).map(w).sum();
    if norm <= 0.0 {
        return Ok(None);
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len() * 4);
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let (v, g) = iou_loss_single(*p, *t)?;
        value += w(i) * v / norm;
        grad.extend(g.iter().map(|gk| w(i) * gk / norm));
    }
    Ok(Some(LossTerm { value, grad }))
}

/// Mean binary cross-entropy with logits against real-valued targets.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<Option<LossTerm>> {
    check_finite("logits", logits)?;
    if logits.len() != targets.len() {
        return Err(Error::Contract("logit/target count mismatch".into()));
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let n = logits.len() as f64;
    let value = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| softplus(z) - t * z)
        .sum::<f64>()
        / n;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| (sigmoid(z) - t) / n)
        .collect();
    Ok(Some(LossTerm { value, grad }))
}

/// Centreness BCE averaged over foreground locations; `None` without any.
pub fn centreness_loss(logits: &[f64], targets: &[f64]) -> Result<Option<LossTerm>> {
    bce_with_logits(logits, targets)
}

/// Per-pixel BCE averaged over pixels and RoIs. Each RoI contributes a
/// flattened `R × R` logit map of its class and a binary target of equal size.
pub fn mask_loss(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Option<LossTerm>> {
    if logits.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} mask predictions but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let flat_l: Vec<f64> = logits.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = targets.iter().flatten().copied().collect();
    bce_with_logits(&flat_l, &flat_t)
}

/// Mean squared error between predicted and actual mask IoU.
pub fn mask_iou_loss(predicted: &[f64], actual: &[f64]) -> Result<Option<LossTerm>> {
    if predicted.len() != actual.len() {
        return Err(Error::Contract("predicted/actual IoU count mismatch".into()));
    }
    check_finite("mask IoU predictions", predicted)?;
    if predicted.is_empty() {
        return Ok(None);
    }
    let n = predicted.len() as f64;
    let value = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).powi(2))
        .sum::<f64>()
        / n;
    let grad = predicted.iter().zip(actual).map(|(p, a)| 2.0 * (p - a) / n).collect();
    Ok(Some(LossTerm { value, grad }))
}

/// Loss components of one step. A `None` term was structurally absent
/// (no locations, RoIs or instances to apply it to), which is not the same
/// as a zero value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: Option<f64>,
    pub centre: Option<f64>,
    #[serde(rename = "box")]
    pub box_reg: Option<f64>,
    pub mask: Option<f64>,
    pub mask_iou: Option<f64>,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("cls", self.cls),
            ("centre", self.centre),
            ("box", self.box_reg),
            ("mask", self.mask),
            ("mask_iou", self.mask_iou),
        ]
    }

    pub fn total(&self) -> f64 {
        self.terms().iter().filter_map(|(_, v)| *v).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_none())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: Option<f64>| v.map(|x| x * k);
        Self {
            cls: s(self.cls),
            centre: s(self.centre),
            box_reg: s(self.box_reg),
            mask: s(self.mask),
            mask_iou: s(self.mask_iou),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_none_or(f64::is_finite))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_unsup: 2.0 }
    }
}

/// `sup.total + λ · unsup.total`.
pub fn total_loss(sup: &LossBreakdown, unsup: &LossBreakdown, weights: &LossWeights) -> f64 {
    sup.total() + weights.lambda_unsup * unsup.total()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight each location's box loss by its centreness target.
    pub centreness_weighted_box: bool,
    /// Train the mask-IoU head at all.
    pub use_maskiou: bool,
    /// Apply the mask-IoU gate to the unsupervised mask-IoU term too.
    pub gate_unsup_maskiou: bool,
    pub mask_threshold: f32,
    /// Restrict positives to `r · stride` around the box centre.
    pub centre_sampling: Option<f32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            centreness_weighted_box: true,
            use_maskiou: true,
            gate_unsup_maskiou: false,
            mask_threshold: 0.5,
            centre_sampling: Some(1.5),
        }
    }
}

/// Gradients with respect to the head outputs, shaped like them.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub cls: Vec<Tensor>,
    pub reg: Vec<Tensor>,
    pub ctr: Vec<Tensor>,
    pub mask_logits: Option<Tensor>,
    pub mask_iou: Option<Tensor>,
}

impl HeadGrads {
    pub fn zeros(out: &DetectionOutput, mask: Option<&MaskOutputs>) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            cls: out.levels.iter().map(|l| z(&l.cls_logits)).collect(),
            reg: out.levels.iter().map(|l| z(&l.box_reg)).collect(),
            ctr: out.levels.iter().map(|l| z(&l.centreness_logits)).collect(),
            mask_logits: mask.map(|m| z(m.logits)),
            mask_iou: mask.and_then(|m| m.iou.map(z)),
        }
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &HeadGrads, k: f32) {
        let add = |a: &mut Tensor, b: &Tensor| {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += k * y;
            }
        };
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            add(a, b);
        }
        for (a, b) in self.reg.iter_mut().zip(&other.reg) {
            add(a, b);
        }
        for (a, b) in self.ctr.iter_mut().zip(&other.ctr) {
            add(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.mask_logits, &other.mask_logits) {
            add(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.mask_iou, &other.mask_iou) {
            add(a, b);
        }
    }
}

/// Mask-branch values for the RoIs of a batch.
#[derive(Clone, Copy, Debug)]
pub struct MaskOutputs<'a> {
    /// `[K, C, R, R]` logits.
    pub logits: &'a Tensor,
    /// `[K, C]` predicted IoU, when the mask-IoU head ran.
    pub iou: Option<&'a Tensor>,
}

/// A RoI whose mask output is row `row` and whose target is `mask`.
#[derive(Clone, Copy, Debug)]
pub struct MaskRoi<'a> {
    pub row: usize,
    pub class: usize,
    pub bbox: BBox,
    pub mask: &'a BinaryMask,
    pub use_mask: bool,
    pub use_iou: bool,
}

/// A labelled image of the batch. Annotations are in the view's geometry.
#[derive(Clone, Debug)]
pub struct SupImage<'a> {
    pub batch_index: usize,
    pub record: &'a ImageRecord,
    /// Mask-head RoIs of this image with the index of their ground truth.
    pub rois: Vec<(usize, BBox, usize)>,
}

/// An unlabelled image of the batch with its teacher pseudo-labels.
#[derive(Clone, Debug)]
pub struct UnsupImage<'a> {
    pub batch_index: usize,
    pub labels: &'a PseudoLabels,
    /// Mask-output row of each pseudo-instance, where the mask head ran on it.
    pub rows: Vec<Option<usize>>,
}

struct Dense {
    batch_index: usize,
    targets: Vec<LevelTargets>,
}

fn dense_terms(
    out: &DetectionOutput,
    images: &[Dense],
    cfg: &LossConfig,
    with_box: bool,
    grads: &mut HeadGrads,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if images.is_empty() {
        return Ok((None, None, None));
    }
    let mut logits = Vec::new();
    let mut cls_targets = Vec::new();
    let mut cls_index = Vec::new();
    let mut box_pred = Vec::new();
    let mut box_target = Vec::new();
    let mut box_weight = Vec::new();
    let mut ctr_logits = Vec::new();
    let mut ctr_target = Vec::new();
    let mut fg_index = Vec::new();
    for img in images {
        let n = img.batch_index;
        for (li, (lvl, t)) in out.levels.iter().zip(&img.targets).enumerate() {
            let (_, c, h, w) = lvl.cls_logits.dims4();
            let hw = h * w;
            debug_assert_eq!(hw, t.num_locations());
            let cls = lvl.cls_logits.data();
            let reg = lvl.box_reg.data();
            let ctr = lvl.centreness_logits.data();
            for loc in 0..hw {
                for k in 0..c {
                    let at = (n * c + k) * hw + loc;
                    logits.push(cls[at] as f64);
                    cls_targets.push((t.class_target[loc] == Some(k)) as u8 as f64);
                    cls_index.push((li, at));
                }
                if t.matched[loc].is_some() {
                    let p: [f64; 4] = std::array::from_fn(|d| reg[(n * 4 + d) * hw + loc] as f64);
                    box_pred.push(p);
                    box_target.push(t.ltrb[loc].map(|v| v as f64));
                    box_weight.push(t.centreness[loc] as f64);
                    ctr_logits.push(ctr[n * hw + loc] as f64);
                    ctr_target.push(t.centreness[loc] as f64);
                    fg_index.push((li, n, hw, loc));
                }
            }
        }
    }
    let fg = fg_index.len().max(1) as f64;
    let alpha = Some(cfg.focal_alpha);
    let mut focal = focal_loss_sum(&logits, &cls_targets, alpha, cfg.focal_gamma)?;
    focal.value /= fg;
    for (g, &(li, at)) in focal.grad.iter().zip(&cls_index) {
        grads.cls[li].data_mut()[at] += (g / fg) as f32;
    }
    if !with_box {
        return Ok((Some(focal.value), None, None));
    }
    let weights = cfg.centreness_weighted_box.then_some(box_weight.as_slice());
    let box_term = iou_loss(&box_pred, &box_target, weights)?;
    if let Some(bt) = &box_term {
        for (i, &(li, n, hw, loc)) in fg_index.iter().enumerate() {
            for d in 0..4 {
                grads.reg[li].data_mut()[(n * 4 + d) * hw + loc] += bt.grad[i * 4 + d] as f32;
            }
        }
    }
    let ctr_term = centreness_loss(&ctr_logits, &ctr_target)?;
    if let Some(ct) = &ctr_term {
        for (i, &(li, n, hw, loc)) in fg_index.iter().enumerate() {
            grads.ctr[li].data_mut()[n * hw + loc] += ct.grad[i] as f32;
        }
    }
    Ok((
        Some(focal.value),
        ctr_term.map(|t| t.value),
        box_term.map(|t| t.value),
    ))
}

fn mask_terms(
    mask: Option<&MaskOutputs>,
    rois: &[MaskRoi],
    image_size: (usize, usize),
    cfg: &LossConfig,
    grads: &mut HeadGrads,
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(m) = mask else {
        if rois.is_empty() {
            return Ok((None, None));
        }
        return Err(Error::Contract(format!(
            "{} mask RoIs but no mask outputs",
            rois.len()
        )));
    };
    let (k, c, r, _) = m.logits.dims4();
    let rr = r * r;
    let (w, h) = image_size;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut mask_rows = Vec::new();
    let mut iou_pred = Vec::new();
    let mut iou_actual = Vec::new();
    let mut iou_rows = Vec::new();
    for roi in rois {
        if roi.row >= k || roi.class >= c {
            return Err(Error::Contract(format!(
                "mask RoI row {} / class {} outside [{k}, {c}]",
                roi.row, roi.class
            )));
        }
        let base = (roi.row * c + roi.class) * rr;
        let z = &m.logits.data()[base..base + rr];
        if roi.use_mask {
            logits.push(z.iter().map(|&v| v as f64).collect::<Vec<_>>());
            targets.push(
                sample_mask_on_grid(roi.mask, &roi.bbox, r)
                    .into_iter()
                    .map(f64::from)
                    .collect::<Vec<_>>(),
            );
            mask_rows.push(base);
        }
        if roi.use_iou && cfg.use_maskiou {
            if let Some(iou) = m.iou {
                let probs: Vec<f32> = z.iter().map(|&v| sigmoid(v as f64) as f32).collect();
                let pasted = paste_mask(&probs, r, &roi.bbox, w, h);
                let pred_mask = binarize_mask(&pasted, w, h, cfg.mask_threshold);
                iou_actual.push(mask_iou(&pred_mask, roi.mask)?);
                let at = roi.row * c + roi.class;
                iou_pred.push(iou.data()[at] as f64);
                iou_rows.push(at);
            }
        }
    }
    let mt = mask_loss(&logits, &targets)?;
    if let Some(t) = &mt {
        let g = grads.mask_logits.as_mut().expect("mask grads allocated");
        for (i, &base) in mask_rows.iter().enumerate() {
            for j in 0..rr {
                g.data_mut()[base + j] += t.grad[i * rr + j] as f32;
            }
        }
    }
    let it = mask_iou_loss(&iou_pred, &iou_actual)?;
    if let Some(t) = &it {
        let g = grads.mask_iou.as_mut().expect("mask-IoU grads allocated");
        for (i, &at) in iou_rows.iter().enumerate() {
            g.data_mut()[at] += t.grad[i] as f32;
        }
    }
    Ok((mt.map(|t| t.value), it.map(|t| t.value)))
}

/// Sum over labelled images: focal classification, centreness
/// BCE, IoU regression, mask BCE and mask-IoU L2.
pub fn supervised_loss(
    out: &DetectionOutput,
    mask: Option<&MaskOutputs>,
    images: &[SupImage],
    pyramid: &PyramidSpec,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGrads)> {
    let mut grads = HeadGrads::zeros(out, mask);
    let dense: Vec<Dense> = images
        .iter()
        .map(|img| {
            let boxes: Vec<TargetBox> = img
                .record
                .annotations
                .iter()
                .map(|a| TargetBox {
                    bbox: a.bbox,
                    class: a.category_id,
                })
                .collect();
            Dense {
                batch_index: img.batch_index,
                targets: assign_locations(pyramid, out.image_size, &boxes, cfg.centre_sampling),
            }
        })
        .collect();
    let (cls, centre, box_reg) = dense_terms(out, &dense, cfg, true, &mut grads)?;
    let rois: Vec<MaskRoi> = images
        .iter()
        .flat_map(|img| {
            img.rois.iter().map(|&(row, bbox, gt)| {
                let a = &img.record.annotations[gt];
                MaskRoi {
                    row,
                    class: a.category_id,
                    bbox,
                    mask: &a.mask,
                    use_mask: true,
                    use_iou: true,
                }
            })
        })
        .collect();
    let (mask_v, iou_v) = mask_terms(mask, &rois, out.image_size, cfg, &mut grads)?;
    Ok((
        LossBreakdown {
            cls,
            centre,
            box_reg,
            mask: mask_v,
            mask_iou: iou_v,
        },
        grads,
    ))
}

/// Gated sum over unlabelled images: classification against
/// pseudo-instances scoring above `tau_cls`, mask BCE on those whose
/// predicted mask IoU exceeds `tau_iou`, and the mask-IoU term. There are
/// no box or centreness terms. Images without a surviving instance
/// contribute nothing.
pub fn unsupervised_loss(
    out: &DetectionOutput,
    mask: Option<&MaskOutputs>,
    images: &[UnsupImage],
    tau_cls: f64,
    tau_iou: f64,
    pyramid: &PyramidSpec,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGrads)> {
    for (name, t) in [("tau_cls", tau_cls), ("tau_iou", tau_iou)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("{name} must be in [0, 1], got {t}")));
        }
    }
    let mut grads = HeadGrads::zeros(out, mask);
    let mut dense = Vec::new();
    let mut rois = Vec::new();
    for img in images {
        let survivors: Vec<usize> = img
            .labels
            .instances
            .iter()
            .enumerate()
            .filter(|(_, p)| p.cls_score as f64 > tau_cls)
            .map(|(i, _)| i)
            .collect();
        if survivors.is_empty() {
            continue;
        }
        let boxes: Vec<TargetBox> = survivors
            .iter()
            .map(|&i| TargetBox {
                bbox: img.labels.instances[i].bbox,
                class: img.labels.instances[i].category_id,
            })
            .collect();
        dense.push(Dense {
            batch_index: img.batch_index,
            targets: assign_locations(pyramid, out.image_size, &boxes, cfg.centre_sampling),
        });
        for &i in &survivors {
            let p = &img.labels.instances[i];
            let Some(row) = img.rows.get(i).copied().flatten() else {
                continue;
            };
            let passed_mask = p.mask_iou_score as f64 > tau_iou;
            rois.push(MaskRoi {
                row,
                class: p.category_id,
                bbox: p.bbox,
                mask: &p.mask,
                use_mask: passed_mask,
                use_iou: !cfg.gate_unsup_maskiou || passed_mask,
            });
        }
    }
    let (cls, _, _) = dense_terms(out, &dense, cfg, false, &mut grads)?;
    let (mask_v, iou_v) = mask_terms(mask, &rois, out.image_size, cfg, &mut grads)?;
    Ok((
        LossBreakdown {
            cls,
            centre: None,
            box_reg: None,
            mask: mask_v,
            mask_iou: iou_v,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let t = focal_loss_sum(&[0.0], &[1.0], None, 0.0).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        let z = (0.9f64 / 0.1).ln();
        let t = focal_loss_sum(&[z], &[1.0], Some(0.25), 2.0).unwrap();
        assert!((t.value - 0.25 * 0.01 * -(0.9f64).ln()).abs() < 1e-12);
        assert!((t.value - 2.634e-4).abs() < 1e-7);
        let t = focal_loss_sum(&[40.0, -40.0], &[1.0, 0.0], Some(0.25), 2.0).unwrap();
        assert!(t.value < 1e-15);
        assert!(focal_loss_sum(&[f64::NAN], &[1.0], None, 2.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let (v, _) = iou_loss_single([1.0; 4], [1.0; 4]).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = iou_loss_single([1.0; 4], [2.0; 4]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(iou_loss_single([0.0, 1.0, 1.0, 1.0], [1.0; 4]).is_err());
    }

    #[test]
    fn bce_examples() {
        let t = centreness_loss(&[0.0], &[0.5]).unwrap().unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        assert!(centreness_loss(&[], &[]).unwrap().is_none());
        let t = mask_loss(&[vec![0.0; 4]], &[vec![1.0, 0.0, 1.0, 1.0]]).unwrap().unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        assert!(mask_loss(&[vec![0.0]], &[]).is_err());
    }

    #[test]
    fn mask_iou_examples() {
        let t = mask_iou_loss(&[0.9], &[0.4]).unwrap().unwrap();
        assert!((t.value - 0.25).abs() < 1e-12);
        assert!((t.grad[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_affine_in_lambda() {
        let sup = LossBreakdown {
            cls: Some(1.0),
            ..Default::default()
        };
        let unsup = LossBreakdown {
            mask: Some(0.5),
            ..Default::default()
        };
        let w = |l| LossWeights { lambda_unsup: l };
        assert_eq!(total_loss(&sup, &unsup, &w(0.0)), 1.0);
        assert_eq!(total_loss(&sup, &unsup, &w(2.0)), 2.0);
        assert_eq!(LossWeights::default().lambda_unsup, 2.0);
    }
}
