//! Training and validation data as described by a resolved configuration.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use polite_teacher::config::RunConfig;
use polite_teacher::data::coco::load_coco_annotations_with;
use polite_teacher::data::{generate_synthetic_shapes, make_supervision_split, CategoryMap, ImageRecord, SplitManifest};

/// Offset between the seeds of the synthetic training and validation sets.
pub const VAL_SEED_OFFSET: u64 = 10_000;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub categories: CategoryMap,
}

fn load_file(path: &str, cfg: &RunConfig) -> Result<(Vec<ImageRecord>, CategoryMap)> {
    let ds = load_coco_annotations_with(Path::new(path), cfg.data.missing_pixels)
        .with_context(|| format!("loading annotations {path}"))?;
    Ok((ds.records, ds.categories))
}

fn synthetic(cfg: &RunConfig, n: usize, seed: u64) -> Result<(Vec<ImageRecord>, CategoryMap)> {
    let d = &cfg.data;
    let records = generate_synthetic_shapes(n, d.image_size, d.num_classes, d.max_instances, seed)?;
    Ok((records, cfg.synthetic_categories()?))
}

/// The training set: annotation file if configured, synthetic shapes otherwise.
pub fn load_train(cfg: &RunConfig) -> Result<(Vec<ImageRecord>, CategoryMap)> {
    let (records, cats) = match &cfg.data.train {
        Some(p) => load_file(p, cfg)?,
        None => synthetic(cfg, cfg.data.synthetic_images, cfg.data.synthetic_seed)?,
    };
    if cats.len() != cfg.data.num_classes {
        bail!(
            "training data defines {} categories but data.num_classes = {}",
            cats.len(),
            cfg.data.num_classes
        );
    }
    Ok((records, cats))
}

/// The validation set. Synthetic validation images use a seed offset from
/// the training corpus so the two never share an image.
pub fn load_val(cfg: &RunConfig) -> Result<(Vec<ImageRecord>, CategoryMap)> {
    match (&cfg.data.val, &cfg.data.train) {
        (Some(p), _) => load_file(p, cfg),
        (None, Some(_)) => bail!("data.val must be set when training from an annotation file"),
        (None, None) => synthetic(
            cfg,
            cfg.data.synthetic_val_images,
            cfg.data.synthetic_seed.wrapping_add(VAL_SEED_OFFSET),
        ),
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (train, categories) = load_train(cfg)?;
    let (val, val_cats) = load_val(cfg)?;
    ensure_same_classes(&categories, &val_cats, "validation data")?;
    Ok(Corpus { train, val, categories })
}

pub fn ensure_same_classes(expected: &CategoryMap, got: &CategoryMap, what: &str) -> Result<()> {
    if expected.names != got.names {
        bail!(
            "{what} classes {:?} do not match the expected classes {:?}",
            got.names,
            expected.names
        );
    }
    Ok(())
}

/// The configured manifest, checked against `records`, or a fresh split.
pub fn split_for(cfg: &RunConfig, records: &[ImageRecord]) -> Result<SplitManifest> {
    let Some(path) = &cfg.data.split else {
        return Ok(make_supervision_split(records, cfg.data.fraction, cfg.seed)?);
    };
    let m = SplitManifest::load(Path::new(path)).with_context(|| format!("loading split {path}"))?;
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let listed = m.supervised_ids.iter().chain(&m.unsupervised_ids);
    if m.len() != ids.len() || !listed.into_iter().all(|id| ids.contains(id.as_str())) {
        bail!("split {path} does not describe the training set");
    }
    Ok(m)
}

/// Labelled records and annotation-free copies of the rest.
pub fn partition(records: &[ImageRecord], split: &SplitManifest) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let sup: HashSet<&str> = split.supervised_ids.iter().map(String::as_str).collect();
    let (labelled, rest): (Vec<&ImageRecord>, Vec<&ImageRecord>) =
        records.iter().partition(|r| sup.contains(r.id.as_str()));
    (
        labelled.into_iter().cloned().collect(),
        rest.into_iter().map(ImageRecord::unlabelled).collect(),
    )
}
