//! Weak/strong view construction.
//!
//! One horizontal flip decision is drawn per image and applied to both views,
//! so teacher predictions on the weak view line up pixel for pixel with the
//! student's strong view. The strong view then adds photometric noise only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, ImageRecord, InstanceAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseSpec {
    pub probability: f32,
    pub min_area_frac: f32,
    pub max_area_frac: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub flip_probability: f32,
    /// Brightness, contrast, saturation and hue strengths.
    pub jitter: [f32; 4],
    pub grayscale_probability: f32,
    /// Gaussian blur sigma range; `(0, 0)` disables blurring.
    pub blur_sigma: (f32, f32),
    pub erase: EraseSpec,
}

impl AugmentationSpec {
    pub fn weak() -> Self {
        Self {
            flip_probability: 0.5,
            jitter: [0.0; 4],
            grayscale_probability: 0.0,
            blur_sigma: (0.0, 0.0),
            erase: EraseSpec {
                probability: 0.0,
                min_area_frac: 0.02,
                max_area_frac: 0.2,
            },
        }
    }

    pub fn strong() -> Self {
        Self {
            flip_probability: 0.5,
            jitter: [0.4, 0.4, 0.4, 0.1],
            grayscale_probability: 0.2,
            blur_sigma: (0.1, 2.0),
            erase: EraseSpec {
                probability: 0.7,
                min_area_frac: 0.02,
                max_area_frac: 0.2,
            },
        }
    }

    /// No-op spec: every probability and strength zero.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f32| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("flip_probability", self.flip_probability)?;
        prob("grayscale_probability", self.grayscale_probability)?;
        prob("erase probability", self.erase.probability)?;
        if self.jitter.iter().any(|j| *j < 0.0 || !j.is_finite()) || self.jitter[3] > 0.5 {
            return Err(Error::Config(format!("invalid jitter {:?}", self.jitter)));
        }
        let (lo, hi) = self.blur_sigma;
        if lo < 0.0 || lo > hi {
            return Err(Error::Config(format!("invalid blur range ({lo}, {hi})")));
        }
        let e = self.erase;
        if !(e.min_area_frac > 0.0 && e.min_area_frac <= e.max_area_frac && e.max_area_frac < 1.0) {
            return Err(Error::Config(format!(
                "erase area fractions must satisfy 0 < min ≤ max < 1, got ({}, {})",
                e.min_area_frac, e.max_area_frac
            )));
        }
        Ok(())
    }
}

/// The geometric transform shared by both views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryLog {
    pub hflip: bool,
    pub width: usize,
}

impl GeometryLog {
    pub fn apply_box(&self, b: &BBox) -> BBox {
        if self.hflip {
            let w = self.width as f32;
            BBox::new(w - b.x2, b.y1, w - b.x1, b.y2)
        } else {
            *b
        }
    }

    pub fn apply_annotation(&self, a: &InstanceAnnotation) -> InstanceAnnotation {
        InstanceAnnotation {
            category_id: a.category_id,
            bbox: self.apply_box(&a.bbox),
            mask: if self.hflip {
                a.mask.flip_horizontal()
            } else {
                a.mask.clone()
            },
        }
    }

    pub fn apply_image(&self, rec: &ImageRecord) -> ImageRecord {
        let mut out = ImageRecord {
            id: rec.id.clone(),
            width: rec.width,
            height: rec.height,
            pixels: rec.pixels.clone(),
            annotations: rec
                .annotations
                .iter()
                .map(|a| self.apply_annotation(a))
                .collect(),
        };
        if self.hflip {
            let w = rec.width;
            for y in 0..rec.height {
                for x in 0..w {
                    let src = (y * w + x) * 3;
                    let dst = (y * w + (w - 1 - x)) * 3;
                    out.pixels[dst..dst + 3].copy_from_slice(&rec.pixels[src..src + 3]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainingViews {
    pub weak: ImageRecord,
    pub strong: ImageRecord,
    pub geometry: GeometryLog,
    /// Erased rectangle `(x0, y0, x1, y1)` in the strong view, if any.
    pub erased: Option<(usize, usize, usize, usize)>,
}

/// Builds the teacher (weak) and student (strong) inputs for one image.
/// The flip probability is taken from the weak spec.
pub fn make_training_views<R: Rng>(
    record: &ImageRecord,
    weak: &AugmentationSpec,
    strong: &AugmentationSpec,
    rng: &mut R,
) -> TrainingViews {
    let geometry = GeometryLog {
        hflip: rng.random::<f32>() < weak.flip_probability,
        width: record.width,
    };
    let weak_view = geometry.apply_image(record);
    let mut strong_view = weak_view.clone();
    let erased = photometric(&mut strong_view, strong, rng);
    TrainingViews {
        weak: weak_view,
        strong: strong_view,
        geometry,
        erased,
    }
}

fn luminance(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn photometric<R: Rng>(
    img: &mut ImageRecord,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let [b, c, s, h] = spec.jitter;
    let px = &mut img.pixels;
    if b > 0.0 {
        let f = rng.random_range(1.0 - b..1.0 + b);
        px.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if c > 0.0 {
        let f = rng.random_range(1.0 - c..1.0 + c);
        let mean = px.chunks(3).map(luminance).sum::<f32>() / (px.len() / 3) as f32;
        px.iter_mut()
            .for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
    }
    if s > 0.0 {
        let f = rng.random_range(1.0 - s..1.0 + s);
        for p in px.chunks_mut(3) {
            let g = luminance(p);
            p.iter_mut().for_each(|v| *v = (g + (*v - g) * f).clamp(0.0, 1.0));
        }
    }
    if h > 0.0 {
        let shift = rng.random_range(-h..h);
        for p in px.chunks_mut(3) {
            let (hue, sat, val) = rgb_to_hsv(p[0], p[1], p[2]);
            let rgb = hsv_to_rgb((hue + shift).rem_euclid(1.0), sat, val);
            p.copy_from_slice(&rgb);
        }
    }
    if spec.grayscale_probability > 0.0 && rng.random::<f32>() < spec.grayscale_probability {
        for p in px.chunks_mut(3) {
            let g = luminance(p);
            p.fill(g);
        }
    }
    let (lo, hi) = spec.blur_sigma;
    if hi > 0.0 {
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        gaussian_blur(px, img.width, img.height, sigma);
    }
    let e = spec.erase;
    if e.probability > 0.0 && rng.random::<f32>() < e.probability {
        let (w, hgt) = (img.width, img.height);
        let area = rng.random_range(e.min_area_frac..=e.max_area_frac) * (w * hgt) as f32;
        let log_ratio = rng.random_range((0.3f32).ln()..(3.3f32).ln());
        let ratio = log_ratio.exp();
        let ew = ((area * ratio).sqrt().round() as usize).clamp(1, w);
        let eh = ((area / ratio).sqrt().round() as usize).clamp(1, hgt);
        let x0 = rng.random_range(0..=w - ew);
        let y0 = rng.random_range(0..=hgt - eh);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for ch in 0..3 {
                    img.pixels[(y * w + x) * 3 + ch] = rng.random();
                }
            }
        }
        return Some((x0, y0, x0 + ew, y0 + eh));
    }
    None
}

fn gaussian_blur(px: &mut [f32], w: usize, h: usize, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0f32; px.len()];
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - radius, w);
                    acc += wt * px[(y * w + xx) * 3 + ch];
                }
                tmp[(y * w + x) * 3 + ch] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - radius, h);
                    acc += wt * tmp[(yy * w + x) * 3 + ch];
                }
                px[(y * w + x) * 3 + ch] = acc;
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
