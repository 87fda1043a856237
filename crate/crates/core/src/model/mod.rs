//! The detector: a small residual backbone, a feature pyramid, shared FCOS
//! heads, a SAG-Mask segmentation head and a mask-IoU scoring head.

mod checkpoint;
mod postprocess;

use polite_nn::layers::{Conv2d, ConvNormAct, GroupNorm, Linear};
use polite_nn::{Graph, Init, ParamId, ParamStore, Roi, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, CategoryMap, ImageRecord};
use crate::error::{Error, Result};
use crate::targets::{assign_roi_to_level, PyramidSpec};

pub use checkpoint::{load_checkpoint, save_checkpoint, SCHEMA_VERSION};
pub use postprocess::{
    binarize_mask, decode_box, decode_level, nms_classwise, paste_mask, sample_mask_on_grid, Candidate,
    InstancePrediction, PostprocessConfig,
};
pub(crate) use postprocess::select_class_probs;

/// Prior probability of foreground used to initialise the classification bias.
const CLS_PRIOR: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Levels carrying the detection heads.
    pub pyramid: PyramidSpec,
    /// Inclusive range of pyramid levels the mask branch pools from. May reach
    /// below the detection levels for finer masks.
    pub mask_levels: (u32, u32),
    /// Backbone widths for strides 2, 4, 8, … up to the top pyramid level.
    pub backbone_widths: Vec<usize>,
    pub fpn_channels: usize,
    pub head_convs: usize,
    pub mask_convs: usize,
    pub mask_resolution: usize,
    pub norm_groups: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            pyramid: PyramidSpec::desk(),
            mask_levels: (2, 4),
            backbone_widths: vec![16, 32, 48, 64, 64],
            fpn_channels: 32,
            head_convs: 1,
            mask_convs: 2,
            mask_resolution: 14,
            norm_groups: 8,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            pyramid: PyramidSpec::full(),
            mask_levels: (3, 5),
            backbone_widths: vec![32, 64, 128, 256, 256, 256, 256],
            fpn_channels: 128,
            head_convs: 4,
            mask_convs: 4,
            mask_resolution: 28,
            norm_groups: 32,
        }
    }

    fn lowest_level(&self) -> u32 {
        self.pyramid.min_level().min(self.mask_levels.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        let (lo, hi) = self.mask_levels;
        if lo > hi || lo < 1 || hi > self.pyramid.max_level() {
            return Err(Error::Config(format!(
                "mask levels {lo}..={hi} must lie within 1..={}",
                self.pyramid.max_level()
            )));
        }
        if self.backbone_widths.len() < self.pyramid.max_level() as usize {
            return Err(Error::Config(format!(
                "need {} backbone widths for a top level of {}",
                self.pyramid.max_level(),
                self.pyramid.max_level()
            )));
        }
        let g = self.norm_groups;
        let divisible = |c: usize| g > 0 && c % g == 0;
        if !self.backbone_widths.iter().all(|&c| divisible(c)) || !divisible(self.fpn_channels) {
            return Err(Error::Config(format!(
                "all widths must be divisible by norm_groups = {g}"
            )));
        }
        if self.mask_resolution < 4 {
            return Err(Error::Config("mask_resolution must be ≥ 4".into()));
        }
        Ok(())
    }

    /// Pyramid over the mask levels, used only for RoI-to-level assignment.
    pub fn mask_pyramid(&self) -> PyramidSpec {
        let (lo, hi) = self.mask_levels;
        PyramidSpec::new(lo, (hi - lo + 1) as usize, 1.0).expect("valid mask levels")
    }
}

/// Everything needed to rebuild and interpret a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub categories: CategoryMap,
}

/// Named parameter tensors plus metadata. Two sets with equal metadata share
/// one namespace and can be mixed element-wise.
#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub meta: ModelMeta,
    pub store: ParamStore,
}

impl DetectorParams {
    pub fn compatible(&self, other: &DetectorParams) -> bool {
        self.meta == other.meta && self.store.same_layout(&other.store)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvNormAct,
    conv: Conv2d,
    norm: GroupNorm,
}

impl ResidualBlock {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.first.forward(g, x);
        let y = self.conv.forward(g, y);
        let y = self.norm.forward(g, y);
        let y = g.add(x, y);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvNormAct,
    block: Option<ResidualBlock>,
}

#[derive(Clone, Debug)]
struct FpnLevel {
    level: u32,
    lateral: Conv2d,
    output: Conv2d,
}

/// Per-level head outputs recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub level: u32,
    pub stride: usize,
    /// `[N, C, h, w]` classification logits.
    pub cls: Var,
    /// `[N, 4, h, w]` positive (l, t, r, b) distances in pixels.
    pub reg: Var,
    /// `[N, 1, h, w]` centreness logits.
    pub ctr: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub levels: Vec<LevelVars>,
    /// Pyramid features the mask branch pools from, by level.
    pub mask_features: Vec<(u32, Var)>,
    pub image_size: (usize, usize),
}

/// Head outputs of one pyramid level, copied out of the graph.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: u32,
    pub stride: usize,
    pub cls_logits: Tensor,
    pub box_reg: Tensor,
    pub centreness_logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct DetectionOutput {
    pub levels: Vec<LevelOutput>,
    pub image_size: (usize, usize),
}

impl DetectionOutput {
    pub fn from_vars(g: &Graph, fwd: &ForwardVars) -> Self {
        Self {
            levels: fwd
                .levels
                .iter()
                .map(|l| LevelOutput {
                    level: l.level,
                    stride: l.stride,
                    cls_logits: g.value(l.cls).clone(),
                    box_reg: g.value(l.reg).clone(),
                    centreness_logits: g.value(l.ctr).clone(),
                })
                .collect(),
            image_size: fwd.image_size,
        }
    }
}

/// Mask-branch outputs for a set of RoIs. Rows follow `order`, which maps
/// each output row back to the index of the RoI it came from.
#[derive(Clone, Debug)]
pub struct MaskVars {
    /// `[K, C, R, R]` mask logits.
    pub logits: Var,
    /// `[K, F, R, R]` pooled pyramid features.
    pub features: Var,
    pub order: Vec<usize>,
}

/// Layer handles of the detector. Values live in a [`DetectorParams`];
/// the same `Detector` serves the student and the teacher.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    mask_pyramid: PyramidSpec,
    stem: ConvNormAct,
    stages: Vec<Stage>,
    fpn: Vec<FpnLevel>,
    cls_tower: Vec<ConvNormAct>,
    box_tower: Vec<ConvNormAct>,
    cls_logits: Conv2d,
    box_pred: Conv2d,
    ctr_pred: Conv2d,
    scales: Vec<ParamId>,
    mask_tower: Vec<ConvNormAct>,
    sag: Conv2d,
    mask_pred: Conv2d,
    iou_convs: Vec<ConvNormAct>,
    iou_fc: Linear,
}

impl Detector {
    /// Creates the architecture and a freshly initialised parameter set.
    pub fn init<R: Rng>(
        config: ModelConfig,
        categories: CategoryMap,
        rng: &mut R,
    ) -> Result<(Self, DetectorParams)> {
        config.validate()?;
        if categories.len() != config.num_classes {
            return Err(Error::Config(format!(
                "category map has {} entries but num_classes = {}",
                categories.len(),
                config.num_classes
            )));
        }
        let mut store = ParamStore::new();
        let det = Self::build(config.clone(), &mut store, rng);
        let params = DetectorParams {
            meta: ModelMeta {
                schema_version: SCHEMA_VERSION,
                config,
                categories,
            },
            store,
        };
        Ok((det, params))
    }

    /// Rebuilds the layer handles for an existing parameter set.
    pub fn for_params(params: &DetectorParams) -> Result<Self> {
        params.meta.config.validate()?;
        let mut scratch = ParamStore::new();
        let mut rng = crate::rng::stream(0, "scratch", 0);
        let det = Self::build(params.meta.config.clone(), &mut scratch, &mut rng);
        if !scratch.same_layout(&params.store) {
            return Err(Error::Contract(
                "parameter set does not match its architecture".into(),
            ));
        }
        Ok(det)
    }

    fn build<R: Rng>(config: ModelConfig, s: &mut ParamStore, rng: &mut R) -> Self {
        let g = config.norm_groups;
        let w = &config.backbone_widths;
        let f = config.fpn_channels;
        let c = config.num_classes;
        let top = config.pyramid.max_level() as usize;
        let lowest = config.lowest_level();

        let stem = ConvNormAct::new(s, "backbone.stem", 3, w[0], 3, 2, g, rng);
        let mut stages = Vec::new();
        for k in 1..top {
            let name = format!("backbone.stage{}", k + 1);
            let down = ConvNormAct::new(s, &format!("{name}.down"), w[k - 1], w[k], 3, 2, g, rng);
            // the coarsest stages see only a few pixels; skip their blocks
            let block = (k + 1 < top).then(|| ResidualBlock {
                first: ConvNormAct::new(s, &format!("{name}.block.a"), w[k], w[k], 3, 1, g, rng),
                conv: Conv2d::new(s, &format!("{name}.block.b.conv"), w[k], w[k], 3, 1, false, rng),
                norm: GroupNorm::new(s, &format!("{name}.block.b.norm"), w[k], g, rng),
            });
            stages.push(Stage { down, block });
        }

        let mut fpn = Vec::new();
        for level in lowest..=top as u32 {
            let cin = w[level as usize - 1];
            fpn.push(FpnLevel {
                level,
                lateral: Conv2d::new(s, &format!("fpn.lateral{level}"), cin, f, 1, 1, true, rng),
                output: Conv2d::new(s, &format!("fpn.output{level}"), f, f, 3, 1, true, rng),
            });
        }

        let tower = |s: &mut ParamStore, rng: &mut R, name: &str, n: usize| {
            (0..n)
                .map(|i| ConvNormAct::new(s, &format!("{name}.{i}"), f, f, 3, 1, g, rng))
                .collect::<Vec<_>>()
        };
        let head_init = Init::Normal { std: 0.01 };
        let cls_tower = tower(s, rng, "head.cls_tower", config.head_convs);
        let box_tower = tower(s, rng, "head.box_tower", config.head_convs);
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let cls_logits =
            Conv2d::with_init(s, "head.cls_logits", [f, c, 3, 1], head_init, Some(prior_bias), rng);
        let box_pred = Conv2d::with_init(s, "head.box_pred", [f, 4, 3, 1], head_init, Some(0.0), rng);
        let ctr_pred = Conv2d::with_init(s, "head.ctr_pred", [f, 1, 3, 1], head_init, Some(0.0), rng);
        let scales = config
            .pyramid
            .levels
            .iter()
            .map(|l| s.add(format!("head.scale{}", l.level_index), Tensor::scalar(1.0), false))
            .collect();

        let mask_tower = tower(s, rng, "mask.tower", config.mask_convs);
        let sag = Conv2d::new(s, "mask.sag", 2, 1, 3, 1, true, rng);
        let mask_pred = Conv2d::with_init(
            s,
            "mask.pred",
            [f, c, 1, 1],
            Init::Kaiming { fan_in: f },
            Some(0.0),
            rng,
        );

        let iou_convs = vec![
            ConvNormAct::new(s, "maskiou.conv0", f + 1, f, 3, 2, g, rng),
            ConvNormAct::new(s, "maskiou.conv1", f, f, 3, 2, g, rng),
        ];
        let side = config.mask_resolution.div_ceil(2).div_ceil(2);
        let iou_fc = Linear::new(s, "maskiou.fc", f * side * side, c, Init::Normal { std: 0.01 }, rng);

        let mask_pyramid = config.mask_pyramid();
        Self {
            config,
            mask_pyramid,
            stem,
            stages,
            fpn,
            cls_tower,
            box_tower,
            cls_logits,
            box_pred,
            ctr_pred,
            scales,
            mask_tower,
            sag,
            mask_pred,
            iou_convs,
            iou_fc,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn mask_resolution(&self) -> usize {
        self.config.mask_resolution
    }

    /// Backbone, pyramid and dense heads on a `[N, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph, images: Tensor) -> Result<ForwardVars> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Config(format!(
                "expected a [N, 3, H, W] batch, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let top = self.config.pyramid.max_level();
        if h < (1 << top) || w < (1 << top) {
            return Err(Error::Config(format!(
                "images of {w}×{h} are smaller than the top stride {}",
                1 << top
            )));
        }
        let x = g.input(images);
        let mut feats = vec![self.stem.forward(g, x)];
        for stage in &self.stages {
            let mut y = stage.down.forward(g, *feats.last().unwrap());
            if let Some(b) = &stage.block {
                y = b.forward(g, y);
            }
            feats.push(y);
        }

        // top-down pathway, coarsest first
        let mut pyramid: Vec<(u32, Var)> = Vec::new();
        let mut above: Option<Var> = None;
        for lvl in self.fpn.iter().rev() {
            let c = feats[lvl.level as usize - 1];
            let mut p = lvl.lateral.forward(g, c);
            if let Some(up) = above {
                let (_, _, ph, pw) = g.value(p).dims4();
                let up = g.upsample(up, ph, pw);
                p = g.add(p, up);
            }
            above = Some(p);
            pyramid.push((lvl.level, lvl.output.forward(g, p)));
        }
        pyramid.reverse();

        let feature = |lvl: u32| pyramid.iter().find(|(l, _)| *l == lvl).unwrap().1;
        let mut levels = Vec::new();
        for (spec, &scale) in self.config.pyramid.levels.iter().zip(&self.scales) {
            let p = feature(spec.level_index);
            let mut t = p;
            for conv in &self.cls_tower {
                t = conv.forward(g, t);
            }
            let cls = self.cls_logits.forward(g, t);
            let mut b = p;
            for conv in &self.box_tower {
                b = conv.forward(g, b);
            }
            let raw = self.box_pred.forward(g, b);
            let sv = g.param(scale);
            let reg = g.scaled_exp(raw, sv, spec.stride as f32);
            let ctr = self.ctr_pred.forward(g, b);
            levels.push(LevelVars {
                level: spec.level_index,
                stride: spec.stride,
                cls,
                reg,
                ctr,
            });
        }
        let (lo, hi) = self.config.mask_levels;
        let mask_features = (lo..=hi).map(|l| (l, feature(l))).collect();
        Ok(ForwardVars {
            levels,
            mask_features,
            image_size: (w, h),
        })
    }

    /// Pools each RoI from its assigned level and runs the mask tower.
    /// Returns `None` for an empty RoI list.
    pub fn mask_head(&self, g: &mut Graph, fwd: &ForwardVars, rois: &[Roi]) -> Option<MaskVars> {
        if rois.is_empty() {
            return None;
        }
        let r = self.config.mask_resolution;
        let (w, h) = fwd.image_size;
        let input_area = (w * h) as f32;
        let mut by_level: Vec<(u32, Vec<usize>)> = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let b = BBox::new(roi.x1, roi.y1, roi.x2, roi.y2);
            let k = assign_roi_to_level(&b, &self.mask_pyramid, input_area);
            match by_level.iter_mut().find(|(l, _)| *l == k) {
                Some((_, v)) => v.push(i),
                None => by_level.push((k, vec![i])),
            }
        }
        by_level.sort_by_key(|(l, _)| *l);
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (level, idx) in &by_level {
            let feat = fwd.mask_features.iter().find(|(l, _)| l == level).unwrap().1;
            let sel: Vec<Roi> = idx.iter().map(|&i| rois[i]).collect();
            parts.push(g.roi_align(feat, &sel, (1usize << level) as f32, r, 2));
            order.extend(idx);
        }
        let features = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)
        };
        let mut x = features;
        for conv in &self.mask_tower {
            x = conv.forward(g, x);
        }
        let x = sag_mask_attention(g, x, &self.sag);
        let logits = self.mask_pred.forward(g, x);
        Some(MaskVars {
            logits,
            features,
            order,
        })
    }

    /// Predicted mask IoU per class, `[K, C]` in (0, 1). `mask_probs` is the
    /// `[K, 1, R, R]` probability map of each RoI's class and enters as a
    /// constant.
    pub fn maskiou_head(&self, g: &mut Graph, features: Var, mask_probs: Tensor) -> Var {
        let m = g.input(mask_probs);
        let mut x = g.concat(&[features, m], 1);
        for conv in &self.iou_convs {
            x = conv.forward(g, x);
        }
        let (k, c, h, w) = g.value(x).dims4();
        let x = g.reshape(x, &[k, c * h * w]);
        let y = self.iou_fc.forward(g, x);
        g.sigmoid(y)
    }

    /// Parameter ids of the mask tower, attention and predictor.
    pub fn mask_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for t in &self.mask_tower {
            ids.extend(conv_norm_ids(t));
        }
        ids.extend(conv_ids(&self.sag));
        ids.extend(conv_ids(&self.mask_pred));
        ids
    }

    /// Parameter ids of the classification tower and logits.
    pub fn cls_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for t in &self.cls_tower {
            ids.extend(conv_norm_ids(t));
        }
        ids.extend(conv_ids(&self.cls_logits));
        ids
    }

    /// Parameter ids of the mask-IoU head.
    pub fn maskiou_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for t in &self.iou_convs {
            ids.extend(conv_norm_ids(t));
        }
        ids.push(self.iou_fc.weight);
        ids.push(self.iou_fc.bias);
        ids
    }
}

fn conv_ids(c: &Conv2d) -> Vec<ParamId> {
    std::iter::once(c.weight).chain(c.bias).collect()
}

fn conv_norm_ids(c: &ConvNormAct) -> Vec<ParamId> {
    let mut v = conv_ids(&c.conv);
    v.push(c.norm.gamma);
    v.push(c.norm.beta);
    v
}

/// `σ(conv3×3([max_c x, mean_c x])) ⊙ x`.
pub fn sag_mask_attention(g: &mut Graph, x: Var, conv: &Conv2d) -> Var {
    let mx = g.channel_max(x);
    let avg = g.channel_mean(x);
    let pooled = g.concat(&[mx, avg], 1);
    let a = conv.forward(g, pooled);
    let a = g.sigmoid(a);
    g.mul_channel(x, a)
}

/// Stacks records into a normalised `[N, 3, H, W]` tensor.
pub fn images_to_tensor(records: &[&ImageRecord]) -> Result<Tensor> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = vec![0.0f32; records.len() * 3 * h * w];
    for (n, rec) in records.iter().enumerate() {
        if rec.width != w || rec.height != h {
            return Err(Error::Config(format!(
                "batch mixes {}×{} and {}×{} images",
                w, h, rec.width, rec.height
            )));
        }
        let base = n * 3 * h * w;
        for (p, px) in rec.pixels.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[base + ch * h * w + p] = (px[ch] - 0.5) / 0.25;
            }
        }
    }
    Ok(Tensor::new(vec![records.len(), 3, h, w], data))
}

/// Dense head outputs for a batch, in evaluation mode.
pub fn forward_detector(
    det: &Detector,
    params: &DetectorParams,
    images: &[&ImageRecord],
) -> Result<DetectionOutput> {
    let mut g = Graph::inference(&params.store);
    let fwd = det.forward(&mut g, images_to_tensor(images)?)?;
    Ok(DetectionOutput::from_vars(&g, &fwd))
}
