//! COCO-style annotation files: reading (polygon and RLE segmentations) and
//! writing (uncompressed RLE) of instance-segmentation datasets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BBox, BinaryMask, ImageRecord, InstanceAnnotation};
use crate::error::{Error, Result};

/// Dense class index ↔ original category id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    /// `original_ids[dense]` is the id used in the source file.
    pub original_ids: Vec<i64>,
    pub names: Vec<String>,
}

impl CategoryMap {
    pub fn new(original_ids: Vec<i64>, names: Vec<String>) -> Self {
        assert_eq!(original_ids.len(), names.len());
        Self {
            original_ids,
            names,
        }
    }

    /// Categories `1..=n` with the given names, as written by the synthetic generator.
    pub fn sequential(names: &[&str]) -> Self {
        Self::new(
            (1..=names.len() as i64).collect(),
            names.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.original_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_ids.is_empty()
    }

    pub fn dense(&self, original: i64) -> Option<usize> {
        self.original_ids.iter().position(|&id| id == original)
    }

    pub fn original(&self, dense: usize) -> i64 {
        self.original_ids[dense]
    }
}

#[derive(Clone, Debug)]
pub struct CocoDataset {
    pub records: Vec<ImageRecord>,
    pub categories: CategoryMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPixels {
    /// Fail when an image file cannot be found.
    Error,
    /// Substitute a black image and warn.
    Zero,
}

pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    load_coco_annotations_with(path, MissingPixels::Zero)
}

pub fn load_coco_annotations_with(path: &Path, missing: MissingPixels) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| Error::parse("<document>", e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    parse_coco(&root, &base, missing)
}

fn array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.get(key)
        .ok_or_else(|| Error::parse(key, "missing"))?
        .as_array()
        .ok_or_else(|| Error::parse(key, "expected an array"))
}

fn int(v: &Value, key: &str, ctx: &str) -> Result<i64> {
    v.get(key)
        .and_then(Value::as_i64)
        .ok_or_else(|| Error::parse(format!("{ctx}.{key}"), "expected an integer"))
}

fn num(v: &Value, ctx: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::parse(ctx, "expected a number"))
}

fn parse_coco(root: &Value, base: &Path, missing: MissingPixels) -> Result<CocoDataset> {
    if !root.is_object() {
        return Err(Error::parse("<document>", "expected a JSON object"));
    }
    let images = array(root, "images")?;
    let annotations = array(root, "annotations")?;
    let categories = array(root, "categories")?;

    let mut cats: BTreeMap<i64, String> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        let ctx = format!("categories[{i}]");
        let id = int(c, "id", &ctx)?;
        let name = c
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        cats.insert(id, name);
    }
    let category_map = CategoryMap::new(cats.keys().copied().collect(), cats.into_values().collect());

    let mut records = Vec::with_capacity(images.len());
    let mut by_id: HashMap<i64, usize> = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        let ctx = format!("images[{i}]");
        let id = int(img, "id", &ctx)?;
        let width = int(img, "width", &ctx)?;
        let height = int(img, "height", &ctx)?;
        if width < 1 || height < 1 {
            return Err(Error::parse(format!("{ctx}.width"), "image size must be ≥ 1"));
        }
        let (width, height) = (width as usize, height as usize);
        let file_name = img.get("file_name").and_then(Value::as_str);
        let pixels = load_pixels(base, file_name, width, height, missing)?;
        // datasets written by this crate keep the record's own id
        let name = match img.get("source_id").and_then(Value::as_str) {
            Some(src) => src.to_string(),
            None => id.to_string(),
        };
        by_id.insert(id, records.len());
        records.push(ImageRecord {
            id: name,
            width,
            height,
            pixels,
            annotations: Vec::new(),
        });
    }

    let mut skipped = 0usize;
    for (i, ann) in annotations.iter().enumerate() {
        let ctx = format!("annotations[{i}]");
        let image_id = int(ann, "image_id", &ctx)?;
        let &slot = by_id.get(&image_id).ok_or_else(|| {
            Error::Validation(format!("{ctx} references unknown image id {image_id}"))
        })?;
        let cat = int(ann, "category_id", &ctx)?;
        let dense = category_map.dense(cat).ok_or_else(|| {
            Error::Validation(format!("{ctx} references unknown category id {cat}"))
        })?;
        if ann.get("iscrowd").and_then(Value::as_i64).unwrap_or(0) != 0 {
            warn!("{ctx}: crowd annotation skipped");
            skipped += 1;
            continue;
        }
        let record = &records[slot];
        let (w, h) = (record.width, record.height);
        let seg = ann
            .get("segmentation")
            .ok_or_else(|| Error::parse(format!("{ctx}.segmentation"), "missing"))?;
        let mask = decode_segmentation(seg, w, h, &format!("{ctx}.segmentation"))?;
        let bbox = match ann.get("bbox") {
            Some(b) => {
                let arr = b
                    .as_array()
                    .filter(|a| a.len() == 4)
                    .ok_or_else(|| Error::parse(format!("{ctx}.bbox"), "expected [x, y, w, h]"))?;
                let v: Vec<f64> = arr
                    .iter()
                    .map(|x| num(x, &format!("{ctx}.bbox")))
                    .collect::<Result<_>>()?;
                BBox::new(
                    v[0] as f32,
                    v[1] as f32,
                    (v[0] + v[2]) as f32,
                    (v[1] + v[3]) as f32,
                )
                .clip(w, h)
            }
            None => match mask.tight_box() {
                Some(b) => b,
                None => BBox::new(0.0, 0.0, 0.0, 0.0),
            },
        };
        let annotation = InstanceAnnotation {
            category_id: dense,
            bbox,
            mask,
        };
        if let Err(e) = annotation.validate(w, h) {
            warn!("{ctx}: skipped ({e})");
            skipped += 1;
            continue;
        }
        records[slot].annotations.push(annotation);
    }
    if skipped > 0 {
        warn!("{skipped} annotations skipped");
    }
    Ok(CocoDataset {
        records,
        categories: category_map,
    })
}

fn load_pixels(
    base: &Path,
    file_name: Option<&str>,
    width: usize,
    height: usize,
    missing: MissingPixels,
) -> Result<Vec<f32>> {
    let candidates: Vec<PathBuf> = file_name
        .map(|f| vec![base.join(f), base.join("images").join(f)])
        .unwrap_or_default();
    match candidates.iter().find(|p| p.is_file()) {
        Some(p) => {
            let img = image::open(p)?.to_rgb8();
            if img.width() as usize != width || img.height() as usize != height {
                return Err(Error::Validation(format!(
                    "{} is {}x{}, annotation says {width}x{height}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            Ok(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        None => match missing {
            MissingPixels::Error => Err(Error::Validation(format!(
                "image file {:?} not found under {}",
                file_name,
                base.display()
            ))),
            MissingPixels::Zero => {
                warn!("image {file_name:?} not found; using blank pixels");
                Ok(vec![0.0; width * height * 3])
            }
        },
    }
}

fn decode_segmentation(seg: &Value, width: usize, height: usize, ctx: &str) -> Result<BinaryMask> {
    match seg {
        Value::Array(polys) => {
            let mut out = BinaryMask::empty(width, height);
            for (i, poly) in polys.iter().enumerate() {
                let coords = poly
                    .as_array()
                    .ok_or_else(|| Error::parse(format!("{ctx}[{i}]"), "expected a polygon"))?;
                if coords.len() < 6 || coords.len() % 2 != 0 {
                    return Err(Error::parse(
                        format!("{ctx}[{i}]"),
                        "polygon needs an even number (≥ 6) of coordinates",
                    ));
                }
                let pts: Vec<(f64, f64)> = coords
                    .chunks(2)
                    .map(|c| Ok((num(&c[0], ctx)?, num(&c[1], ctx)?)))
                    .collect::<Result<_>>()?;
                let m = rasterize_polygon(&pts, width, height);
                for (o, v) in out.data.iter_mut().zip(m.data) {
                    *o |= v;
                }
            }
            Ok(out)
        }
        Value::Object(obj) => {
            let size = obj
                .get("size")
                .and_then(Value::as_array)
                .filter(|s| s.len() == 2)
                .ok_or_else(|| Error::parse(format!("{ctx}.size"), "expected [h, w]"))?;
            let (h, w) = (
                size[0].as_u64().unwrap_or(0) as usize,
                size[1].as_u64().unwrap_or(0) as usize,
            );
            if (h, w) != (height, width) {
                return Err(Error::parse(
                    format!("{ctx}.size"),
                    format!("RLE is {h}x{w}, image is {height}x{width}"),
                ));
            }
            let counts = match obj.get("counts") {
                Some(Value::Array(c)) => c
                    .iter()
                    .map(|v| {
                        v.as_u64()
                            .ok_or_else(|| Error::parse(format!("{ctx}.counts"), "expected integers"))
                    })
                    .collect::<Result<Vec<u64>>>()?,
                Some(Value::String(s)) => decode_rle_string(s)
                    .ok_or_else(|| Error::parse(format!("{ctx}.counts"), "malformed compressed RLE"))?,
                _ => return Err(Error::parse(format!("{ctx}.counts"), "missing")),
            };
            rle_to_mask(&counts, width, height)
                .ok_or_else(|| Error::parse(format!("{ctx}.counts"), "run lengths exceed image size"))
        }
        _ => Err(Error::parse(ctx, "expected polygon list or RLE object")),
    }
}

/// Even-odd scanline fill sampled at pixel centres.
pub fn rasterize_polygon(points: &[(f64, f64)], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height);
    let n = points.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (xa, ya) = points[i];
            let (xb, yb) = points[(i + 1) % n];
            if (ya <= yc && yc < yb) || (yb <= yc && yc < ya) {
                xs.push(xa + (yc - ya) * (xb - xa) / (yb - ya));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            // pixel x is inside when its centre x + 0.5 lies in [left, right)
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in start..end {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Column-major run lengths, starting with a run of zeros.
fn rle_to_mask(counts: &[u64], width: usize, height: usize) -> Option<BinaryMask> {
    let mut mask = BinaryMask::empty(width, height);
    let total = width * height;
    let mut pos = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        let end = pos.checked_add(c as usize)?;
        if end > total {
            return None;
        }
        if i % 2 == 1 {
            for p in pos..end {
                let (x, y) = (p / height, p % height);
                mask.set(x, y, true);
            }
        }
        pos = end;
    }
    Some(mask)
}

pub fn mask_to_rle(mask: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(x, y) as u8;
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes the compact string form of COCO run lengths.
fn decode_rle_string(s: &str) -> Option<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = *bytes.get(p)? as i64 - 48;
            if !(0..64).contains(&c) {
                return None;
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts.into_iter().map(|c| u64::try_from(c).ok()).collect()
}

#[derive(Serialize)]
struct OutImage<'a> {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_id: Option<&'a str>,
}

#[derive(Serialize)]
struct OutRle {
    size: [usize; 2],
    counts: Vec<u64>,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: usize,
    image_id: usize,
    category_id: i64,
    bbox: [f32; 4],
    area: usize,
    iscrowd: u8,
    segmentation: OutRle,
}

#[derive(Serialize)]
struct OutCategory<'a> {
    id: i64,
    name: &'a str,
}

#[derive(Serialize)]
struct OutDocument<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory<'a>>,
}

/// Writes `images/<n>.png` plus `annotations.json` under `dir`. Image ids
/// are 1-based positions; the original record id is kept as `source_id`.
pub fn write_coco_dataset(
    dir: &Path,
    records: &[ImageRecord],
    categories: &CategoryMap,
) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut doc = OutDocument {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories
            .original_ids
            .iter()
            .zip(&categories.names)
            .map(|(&id, name)| OutCategory { id, name })
            .collect(),
    };
    for (i, rec) in records.iter().enumerate() {
        let image_id = i + 1;
        let file_name = format!("{image_id:06}.png");
        let bytes: Vec<u8> = rec
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(rec.width as u32, rec.height as u32, bytes)
            .ok_or_else(|| Error::Validation(format!("bad pixel buffer for {}", rec.id)))?;
        img.save(img_dir.join(&file_name))?;
        doc.images.push(OutImage {
            id: image_id,
            file_name: format!("images/{file_name}"),
            width: rec.width,
            height: rec.height,
            source_id: Some(&rec.id),
        });
        for ann in &rec.annotations {
            doc.annotations.push(OutAnnotation {
                id: doc.annotations.len() + 1,
                image_id,
                category_id: categories.original(ann.category_id),
                bbox: [
                    ann.bbox.x1,
                    ann.bbox.y1,
                    ann.bbox.width(),
                    ann.bbox.height(),
                ],
                area: ann.mask.area(),
                iscrowd: 0,
                segmentation: OutRle {
                    size: [rec.height, rec.width],
                    counts: mask_to_rle(&ann.mask),
                },
            });
        }
    }
    let path = dir.join("annotations.json");
    let text = serde_json::to_string(&doc).expect("serialisable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn compressed_rle_matches_counts() {
        // from the fourth count on, each value is a delta against the count two back
        let counts = decode_rle_string("52203").unwrap();
        assert_eq!(counts, vec![5, 2, 2, 2, 5]);
    }

    #[test]
    fn rle_round_trip() {
        let mut m = BinaryMask::empty(5, 4);
        for (x, y) in [(0, 0), (1, 1), (1, 2), (4, 3)] {
            m.set(x, y, true);
        }
        let counts = mask_to_rle(&m);
        assert_eq!(rle_to_mask(&counts, 5, 4).unwrap(), m);
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse_coco(&json!({"images": [], "categories": []}), Path::new("."), MissingPixels::Zero)
            .unwrap_err();
        assert!(err.to_string().contains("annotations"), "{err}");
    }

    #[test]
    fn unknown_image_is_a_validation_error() {
        let doc = json!({
            "images": [{"id": 1, "width": 4, "height": 4}],
            "categories": [{"id": 3, "name": "a"}],
            "annotations": [{"id": 1, "image_id": 2, "category_id": 3, "bbox": [0,0,2,2],
                             "segmentation": [[0,0,2,0,2,2,0,2]]}]
        });
        let err = parse_coco(&doc, Path::new("."), MissingPixels::Zero).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn category_ids_become_dense() {
        let doc = json!({
            "images": [{"id": 10, "width": 8, "height": 8}],
            "categories": [{"id": 90, "name": "z"}, {"id": 7, "name": "a"}],
            "annotations": [{"id": 1, "image_id": 10, "category_id": 90, "bbox": [1,1,3,3],
                             "segmentation": [[1,1,4,1,4,4,1,4]]}]
        });
        let ds = parse_coco(&doc, Path::new("."), MissingPixels::Zero).unwrap();
        assert_eq!(ds.categories.original_ids, vec![7, 90]);
        assert_eq!(ds.records[0].annotations[0].category_id, 1);
        assert_eq!(ds.records[0].annotations[0].mask.area(), 9);
    }
}
