//! Per-location training targets for the anchor-free heads, and RoI-to-level
//! assignment for the mask branch.

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLevelSpec {
    /// Pyramid level `k`, with `stride = 2^k`.
    pub level_index: u32,
    pub stride: usize,
    /// Half-open band `(min, max]` of `max(l, t, r, b)` handled by this level.
    #[serde(with = "range_serde")]
    pub regression_range: (f32, f32),
}

/// JSON has no infinity, so an unbounded upper limit is written as `null`.
mod range_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(r: &(f32, f32), s: S) -> Result<S::Ok, S::Error> {
        (r.0, r.1.is_finite().then_some(r.1)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f32, f32), D::Error> {
        let (lo, hi) = <(f32, Option<f32>)>::deserialize(d)?;
        Ok((lo, hi.unwrap_or(f32::INFINITY)))
    }
}

impl FeatureLevelSpec {
    /// Number of locations along an image side of `size` pixels.
    pub fn grid_len(&self, size: usize) -> usize {
        size.div_ceil(self.stride)
    }

    /// Pixel coordinate of location `i` along one axis.
    pub fn location(&self, i: usize) -> f32 {
        (self.stride / 2 + i * self.stride) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<FeatureLevelSpec>,
}

impl PyramidSpec {
    /// Levels `first..first + count`; level `k`'s band ends at `range_scale · 2^k`
    /// and the top level is unbounded.
    pub fn new(first_level: u32, count: usize, range_scale: f32) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        let mut levels = Vec::with_capacity(count);
        let mut lo = 0.0f32;
        for i in 0..count {
            let k = first_level + i as u32;
            let stride = 1usize << k;
            let hi = if i + 1 == count {
                f32::INFINITY
            } else {
                range_scale * stride as f32
            };
            levels.push(FeatureLevelSpec {
                level_index: k,
                stride,
                regression_range: (lo, hi),
            });
            lo = hi;
        }
        let spec = Self { levels };
        spec.validate()?;
        Ok(spec)
    }

    /// Strides 8/16/32, bands (0,16], (16,32], (32,∞).
    pub fn desk() -> Self {
        Self::new(3, 3, 2.0).expect("valid")
    }

    /// Strides 8..128 with the classic (0,64], …, (512,∞) bands.
    pub fn full() -> Self {
        Self::new(3, 5, 8.0).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("empty pyramid".into()));
        }
        if self.levels[0].regression_range.0 != 0.0 {
            return Err(Error::Config("first regression range must start at 0".into()));
        }
        for w in self.levels.windows(2) {
            if w[1].stride <= w[0].stride {
                return Err(Error::Config("strides must strictly increase".into()));
            }
            if w[1].regression_range.0 != w[0].regression_range.1 {
                return Err(Error::Config("regression ranges must be contiguous".into()));
            }
        }
        for l in &self.levels {
            if l.stride != 1 << l.level_index {
                return Err(Error::Config(format!(
                    "level {} must have stride {}",
                    l.level_index,
                    1 << l.level_index
                )));
            }
            if !(l.regression_range.0 < l.regression_range.1) {
                return Err(Error::Config("empty regression range".into()));
            }
        }
        if self.levels.last().unwrap().regression_range.1 != f32::INFINITY {
            return Err(Error::Config("top regression range must be unbounded".into()));
        }
        Ok(())
    }

    pub fn min_level(&self) -> u32 {
        self.levels[0].level_index
    }

    pub fn max_level(&self) -> u32 {
        self.levels.last().unwrap().level_index
    }
}

/// Distances from `(x, y)` to the left, top, right and bottom edges of `b`.
/// Callers guarantee the point is strictly inside.
pub fn compute_ltrb(x: f32, y: f32, b: &BBox) -> [f32; 4] {
    let ltrb = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
    debug_assert!(ltrb.iter().all(|d| *d > 0.0), "location outside box");
    ltrb
}

pub fn compute_centreness(l: f64, t: f64, r: f64, b: f64) -> Result<f64> {
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!(
            "centreness needs positive distances, got ({l}, {t}, {r}, {b})"
        )));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Targets for every location of one pyramid level, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Class index per location; `None` is background.
    pub class_target: Vec<Option<usize>>,
    /// Index of the matched instance per location.
    pub matched: Vec<Option<usize>>,
    /// Valid only where `matched` is `Some`.
    pub ltrb: Vec<[f32; 4]>,
    pub centreness: Vec<f32>,
}

impl LevelTargets {
    pub fn num_locations(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn num_foreground(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn location(&self, idx: usize) -> (f32, f32) {
        let (gx, gy) = (idx % self.grid_w, idx / self.grid_w);
        (
            (self.stride / 2 + gx * self.stride) as f32,
            (self.stride / 2 + gy * self.stride) as f32,
        )
    }
}

/// A box with its class, as consumed by [`assign_locations`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetBox {
    pub bbox: BBox,
    pub class: usize,
}

/// A location is foreground for the smallest-area box that strictly contains
/// it and whose largest edge distance falls in the level's band.
/// With `centre_radius = Some(r)`, a location must also lie within
/// `r · stride` of the box centre.
pub fn assign_locations(
    pyramid: &PyramidSpec,
    image_size: (usize, usize),
    boxes: &[TargetBox],
    centre_radius: Option<f32>,
) -> Vec<LevelTargets> {
    let (width, height) = image_size;
    pyramid
        .levels
        .iter()
        .map(|level| {
            let grid_w = level.grid_len(width);
            let grid_h = level.grid_len(height);
            let n = grid_w * grid_h;
            let mut t = LevelTargets {
                stride: level.stride,
                grid_w,
                grid_h,
                class_target: vec![None; n],
                matched: vec![None; n],
                ltrb: vec![[0.0; 4]; n],
                centreness: vec![0.0; n],
            };
            let (lo, hi) = level.regression_range;
            for idx in 0..n {
                let (x, y) = t.location(idx);
                let mut best: Option<(usize, f32)> = None;
                for (bi, tb) in boxes.iter().enumerate() {
                    let b = &tb.bbox;
                    if !(x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2) {
                        continue;
                    }
                    if let Some(r) = centre_radius {
                        let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
                        let lim = r * level.stride as f32;
                        if (x - cx).abs() >= lim || (y - cy).abs() >= lim {
                            continue;
                        }
                    }
                    let d = compute_ltrb(x, y, b);
                    let m = d.iter().copied().fold(0.0f32, f32::max);
                    if !(m > lo && m <= hi) {
                        continue;
                    }
                    let area = b.area();
                    if best.is_none_or(|(_, a)| area < a) {
                        best = Some((bi, area));
                    }
                }
                if let Some((bi, _)) = best {
                    let d = compute_ltrb(x, y, &boxes[bi].bbox);
                    t.class_target[idx] = Some(boxes[bi].class);
                    t.matched[idx] = Some(bi);
                    t.ltrb[idx] = d;
                    t.centreness[idx] =
                        compute_centreness(d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64)
                            .expect("strictly inside") as f32;
                }
            }
            t
        })
        .collect()
}

/// Pyramid level for a RoI: `ceil(k_max − log2(input_area / box_area))`,
/// clamped to the available levels.
pub fn assign_roi_to_level(b: &BBox, pyramid: &PyramidSpec, input_area: f32) -> u32 {
    let (k_min, k_max) = (pyramid.min_level(), pyramid.max_level());
    let area = b.area().max(1e-6);
    let k = (k_max as f32 - (input_area / area).log2()).ceil();
    (k.max(k_min as f32).min(k_max as f32)) as u32
}
