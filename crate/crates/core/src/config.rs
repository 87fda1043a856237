//! Run configuration: every hyperparameter as a flat `key = value` entry.
//!
//! Values resolve in three layers (profile defaults, then a config file, then
//! command-line overrides) and each key remembers which layer set it. The
//! resolved form written to `config.resolved` reads back to the same values.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::data::coco::MissingPixels;
use crate::data::{AugmentationSpec, CategoryMap};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::{ModelConfig, PostprocessConfig};
use crate::ssl::{TrainConfig, TrainingSchedule};
use crate::targets::PyramidSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected desk or full)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// COCO-style annotation file for training; synthetic data when unset.
    pub train: Option<String>,
    /// Annotation file for validation; synthetic data when unset.
    pub val: Option<String>,
    /// Split manifest to reuse instead of drawing a new one.
    pub split: Option<String>,
    pub fraction: f64,
    pub missing_pixels: MissingPixels,
    pub synthetic_images: usize,
    pub synthetic_val_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub max_instances: usize,
    pub synthetic_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub first_level: u32,
    pub num_levels: usize,
    /// Level `k` handles objects whose largest edge distance is up to `range_scale · 2^k`.
    pub range_scale: f32,
    pub mask_level_min: u32,
    pub mask_level_max: u32,
    pub backbone_widths: Vec<usize>,
    pub fpn_channels: usize,
    pub head_convs: usize,
    pub mask_convs: usize,
    pub mask_resolution: usize,
    pub norm_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslSection {
    pub tau_cls: f32,
    pub tau_iou: f32,
    pub lambda: f64,
    pub ema_alpha: f64,
    pub proposals_per_image: usize,
    /// Feed labelled images to the student as strong (rather than weak) views.
    pub sup_strong: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub run_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub ssl: SslSection,
    pub burnin: TrainingSchedule,
    pub mutual: TrainingSchedule,
    pub postprocess: PostprocessConfig,
    /// Decoding used by the teacher for pseudo-labels.
    pub teacher_postprocess: PostprocessConfig,
    pub weak: AugmentationSpec,
    pub strong: AugmentationSpec,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// Small backbone, 64 px synthetic images and a schedule of a few
    /// thousand steps that fits a single CPU core.
    pub fn desk() -> Self {
        let m = ModelConfig::desk(3);
        Self {
            profile: Profile::Desk,
            seed: 1,
            run_dir: None,
            data: DataConfig {
                train: None,
                val: None,
                split: None,
                fraction: 0.1,
                missing_pixels: MissingPixels::Zero,
                synthetic_images: 1000,
                synthetic_val_images: 200,
                image_size: 64,
                num_classes: 3,
                max_instances: 4,
                synthetic_seed: 1,
            },
            model: ModelSection {
                first_level: 3,
                num_levels: 3,
                range_scale: 2.0,
                mask_level_min: m.mask_levels.0,
                mask_level_max: m.mask_levels.1,
                backbone_widths: m.backbone_widths,
                fpn_channels: m.fpn_channels,
                head_convs: m.head_convs,
                mask_convs: m.mask_convs,
                mask_resolution: m.mask_resolution,
                norm_groups: m.norm_groups,
            },
            loss: LossConfig::default(),
            ssl: SslSection {
                tau_cls: 0.6,
                tau_iou: 0.9,
                lambda: 2.0,
                ema_alpha: 0.999,
                proposals_per_image: 4,
                sup_strong: false,
            },
            burnin: TrainingSchedule {
                max_steps: 1500,
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_steps: 50,
                lr_drop_steps: vec![1100],
                lr_drop_factor: 0.1,
                batch_sup: 8,
                batch_unsup: 0,
                eval_every: 250,
                patience: 5,
            },
            mutual: TrainingSchedule {
                max_steps: 2000,
                lr: 0.003,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_steps: 50,
                lr_drop_steps: Vec::new(),
                lr_drop_factor: 0.1,
                batch_sup: 8,
                batch_unsup: 8,
                eval_every: 250,
                patience: 5,
            },
            postprocess: PostprocessConfig::default(),
            teacher_postprocess: PostprocessConfig::default(),
            weak: AugmentationSpec::weak(),
            strong: AugmentationSpec::strong(),
        }
    }

    /// Full-scale settings: larger model and the 270k-step schedule.
    pub fn full() -> Self {
        let m = ModelConfig::full(80);
        let p = PyramidSpec::full();
        let mut c = Self::desk();
        c.profile = Profile::Full;
        c.data.image_size = 512;
        c.data.num_classes = 80;
        c.model = ModelSection {
            first_level: p.min_level(),
            num_levels: p.levels.len(),
            range_scale: 8.0,
            mask_level_min: m.mask_levels.0,
            mask_level_max: m.mask_levels.1,
            backbone_widths: m.backbone_widths,
            fpn_channels: m.fpn_channels,
            head_convs: m.head_convs,
            mask_convs: m.mask_convs,
            mask_resolution: m.mask_resolution,
            norm_groups: m.norm_groups,
        };
        c.ssl.ema_alpha = 0.9996;
        c.ssl.proposals_per_image = 16;
        c.ssl.sup_strong = false;
        let mut burnin = TrainingSchedule::full();
        burnin.batch_unsup = 0;
        c.burnin = burnin;
        c.mutual = TrainingSchedule::full();
        c.postprocess.max_dets = 100;
        c.postprocess.pre_nms_top_k = 1000;
        c.teacher_postprocess = c.postprocess;
        c
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            num_classes: self.data.num_classes,
            pyramid: PyramidSpec::new(m.first_level, m.num_levels, m.range_scale)?,
            mask_levels: (m.mask_level_min, m.mask_level_max),
            backbone_widths: m.backbone_widths.clone(),
            fpn_channels: m.fpn_channels,
            head_convs: m.head_convs,
            mask_convs: m.mask_convs,
            mask_resolution: m.mask_resolution,
            norm_groups: m.norm_groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            tau_cls: self.ssl.tau_cls,
            tau_iou: self.ssl.tau_iou,
            ema_alpha: self.ssl.ema_alpha,
            weights: LossWeights {
                lambda_unsup: self.ssl.lambda,
            },
            loss: self.loss,
            eval_pp: self.postprocess,
            teacher_pp: self.teacher_postprocess,
            proposals_per_image: self.ssl.proposals_per_image,
            weak: self.weak,
            strong: self.strong,
            sup_strong: self.ssl.sup_strong,
            seed: self.seed,
        }
    }

    /// Category names for synthetic data of this configuration.
    pub fn synthetic_categories(&self) -> Result<CategoryMap> {
        let names = crate::data::SHAPE_NAMES;
        if self.data.num_classes > names.len() {
            return Err(Error::Config(format!(
                "synthetic data supports at most {} classes",
                names.len()
            )));
        }
        Ok(CategoryMap::sequential(&names[..self.data.num_classes]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.fraction must be in (0, 1], got {}",
                self.data.fraction
            )));
        }
        self.model_config()?;
        self.burnin.validate()?;
        self.mutual.validate()?;
        self.train_config().validate()
    }

    /// Flattened `(key, value)` entries in key order.
    pub fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        flatten("", &to_value(self)?, &mut out);
        Ok(out)
    }
}

fn to_value(cfg: &RunConfig) -> Result<Value> {
    // Round-trip through text so that f32 fields keep their short decimal form.
    let text = serde_json::to_string(cfg)
        .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(render_scalar).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        scalar => out.push((prefix.to_string(), render_scalar(scalar))),
    }
}

fn lookup<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    (!cur.is_object()).then_some(cur)
}

fn infer_scalar(s: &str) -> Value {
    if let Ok(b) = s.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(u) = s.parse::<u64>() {
        return Value::Number(u.into());
    }
    if let Some(n) = s.parse::<f64>().ok().and_then(Number::from_f64) {
        return Value::Number(n);
    }
    Value::String(s.to_string())
}

fn parse_scalar(key: &str, s: &str, template: &Value) -> Result<Value> {
    if s == "none" {
        return Ok(Value::Null);
    }
    let bad = |what: &str| Error::parse(key, format!("expected {what}, got `{s}`"));
    Ok(match template {
        Value::Bool(_) => Value::Bool(s.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => Value::Number(
            s.parse::<f64>()
                .ok()
                .and_then(Number::from_f64)
                .ok_or_else(|| bad("a finite number"))?,
        ),
        Value::Number(_) => Value::Number(
            s.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?
                .into(),
        ),
        Value::String(_) => Value::String(s.to_string()),
        _ => infer_scalar(s),
    })
}

fn parse_value(key: &str, s: &str, template: &Value) -> Result<Value> {
    let s = s.trim();
    match template {
        Value::Array(items) => {
            if s.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let elem = items.first().cloned().unwrap_or(Value::Null);
            s.split(',')
                .map(|p| parse_scalar(key, p.trim(), &elem))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        t => parse_scalar(key, s, t),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(
                format!("line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A fully resolved configuration with the layer that set each key.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Provenance>,
}

impl ResolvedConfig {
    /// Resolves profile defaults, then `file_text`, then `flags`.
    pub fn resolve(file_text: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let file = match file_text {
            Some(t) => parse_entries(t)?,
            None => Vec::new(),
        };
        let profile_of = |entries: &[(String, String)]| -> Result<Option<Profile>> {
            entries
                .iter()
                .rev()
                .find(|(k, _)| k == "profile")
                .map(|(_, v)| v.parse())
                .transpose()
        };
        let profile = profile_of(flags)?
            .or(profile_of(&file)?)
            .unwrap_or(Profile::Desk);
        let defaults = RunConfig::for_profile(profile);
        let mut template = to_value(&defaults)?;
        let mut value = template.clone();
        let mut provenance: BTreeMap<String, Provenance> = defaults
            .entries()?
            .into_iter()
            .map(|(k, _)| (k, Provenance::Default))
            .collect();
        for (layer, entries) in [(Provenance::File, &file), (Provenance::Flag, &flags.to_vec())] {
            for (k, v) in entries {
                let Some(slot) = lookup(&mut value, k) else {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                };
                let t = lookup(&mut template, k).cloned().unwrap_or(Value::Null);
                *slot = parse_value(k, v, &t)?;
                provenance.insert(k.clone(), layer);
            }
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(Self { config, provenance })
    }

    /// The `config.resolved` text: one `key = value` line per entry, with the
    /// provenance as a trailing comment.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::from("# fully resolved run configuration\n");
        for (k, v) in self.config.entries()? {
            let p = self.provenance.get(&k).copied().unwrap_or(Provenance::Default);
            let _ = writeln!(s, "{k} = {v}  # {p}");
        }
        Ok(s)
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.config.run_dir.as_ref().map(PathBuf::from)
    }
}
