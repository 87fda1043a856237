//! Images, instance annotations, dataset ingestion and the weak/strong view pair.

mod augment;
pub mod coco;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{make_training_views, AugmentationSpec, EraseSpec, GeometryLog, TrainingViews};
pub use coco::{load_coco_annotations, write_coco_dataset, CategoryMap};
pub use split::{make_supervision_split, split_ids, SplitManifest};
pub use synthetic::{generate_synthetic_shapes, SHAPE_NAMES};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels; `x2`/`y2` are exclusive
/// edges, so a box covering pixel columns `0..=9` has `x2 = 10`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x1.is_finite() && self.y2.is_finite()
    }

    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f32, height as f32);
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn contains_box(&self, other: &BBox, slack: f32) -> bool {
        other.x1 >= self.x1 - slack
            && other.y1 >= self.y1 - slack
            && other.x2 <= self.x2 + slack
            && other.y2 <= self.y2 + slack
    }
}

/// Row-major binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} set)",
            self.width,
            self.height,
            self.area()
        )
    }
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight box around the set pixels (exclusive far edges), `None` when empty.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32))
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = BinaryMask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + (self.width - 1 - x)] = self.data[y * self.width + x];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    /// Dense class index in `[0, num_classes)`.
    pub category_id: usize,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

impl InstanceAnnotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "degenerate box {:?}",
                self.bbox
            )));
        }
        if self.mask.width != width || self.mask.height != height {
            return Err(Error::Validation(format!(
                "mask is {}x{}, image is {width}x{height}",
                self.mask.width, self.mask.height
            )));
        }
        let Some(tight) = self.mask.tight_box() else {
            return Err(Error::Validation("mask has no positive pixel".into()));
        };
        if !self.bbox.contains_box(&tight, 1.0) {
            return Err(Error::Validation(format!(
                "mask extent {tight:?} exceeds box {:?}",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// An image with values in `[0, 1]`, stored height × width × 3 (RGB interleaved).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub annotations: Vec<InstanceAnnotation>,
}

impl ImageRecord {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!("image {} is empty", self.id)));
        }
        if self.pixels.len() != self.width * self.height * 3 {
            return Err(Error::Validation(format!(
                "image {} has {} values for {}x{}x3",
                self.id,
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        let bounds = BBox::new(0.0, 0.0, self.width as f32, self.height as f32);
        for ann in &self.annotations {
            if !bounds.contains_box(&ann.bbox, 0.0) {
                return Err(Error::Validation(format!(
                    "image {}: box {:?} outside the image",
                    self.id, ann.bbox
                )));
            }
            ann.validate(self.width, self.height)?;
        }
        Ok(())
    }

    /// Copy without annotations, as seen by the unsupervised branch.
    pub fn unlabelled(&self) -> ImageRecord {
        ImageRecord {
            annotations: Vec::new(),
            ..self.clone()
        }
    }
}
