//! Synthetic shapes corpus.
//!
//! Each image has a noisy two-colour gradient background with a few thin
//! clutter strokes, and one or more filled shapes painted back to front.
//! Classes are shape types. Object colour depends on the class but the hue
//! bands overlap, so colour alone does not separate the classes. Later shapes
//! occlude earlier ones; ground-truth masks are the visible pixels and boxes
//! are their tight extents.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{BinaryMask, ImageRecord, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::rng;

pub const SHAPE_NAMES: [&str; 6] = ["disc", "rectangle", "triangle", "diamond", "ring", "cross"];

/// Smallest visible area, in pixels, kept for an instance.
const MIN_VISIBLE_AREA: usize = 16;
/// Largest fraction of an earlier shape a new shape may hide.
const MAX_OCCLUSION: f32 = 0.3;

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: usize,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    aspect: f32,
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        match self.class {
            0 => u * u + (v / self.aspect).powi(2) <= 1.0,
            1 => u.abs() <= 1.0 && v.abs() <= self.aspect,
            2 => {
                // equilateral triangle with unit circumradius, apex along -v
                let inside = |ax: f32, ay: f32, bx: f32, by: f32| (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0;
                let h = 3f32.sqrt() / 2.0;
                let (p0, p1, p2) = ((0.0, -1.0), (h, 0.5), (-h, 0.5));
                inside(p0.0, p0.1, p1.0, p1.1)
                    && inside(p1.0, p1.1, p2.0, p2.1)
                    && inside(p2.0, p2.1, p0.0, p0.1)
            }
            3 => u.abs() + v.abs() / (0.75 * self.aspect.max(0.8)) <= 1.0,
            4 => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            _ => {
                let arm = 0.36;
                (u.abs() <= 1.0 && v.abs() <= arm) || (u.abs() <= arm && v.abs() <= 1.0)
            }
        }
    }

    fn rasterize(&self, size: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(size, size);
        let r = self.radius.ceil() as isize + 1;
        let (cx, cy) = (self.cx as isize, self.cy as isize);
        for y in (cy - r).max(0)..(cy + r + 1).min(size as isize) {
            for x in (cx - r).max(0)..(cx + r + 1).min(size as isize) {
                if self.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    m.set(x as usize, y as usize, true);
                }
            }
        }
        m
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
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

fn sample_shape<R: Rng>(rng: &mut R, class: usize, size: usize) -> Shape {
    let s = size as f32;
    let radius = rng.random_range(0.09 * s..0.25 * s);
    let margin = radius + 1.0;
    Shape {
        class,
        cx: rng.random_range(margin..s - margin),
        cy: rng.random_range(margin..s - margin),
        radius,
        angle: rng.random_range(0.0..2.0 * PI),
        aspect: rng.random_range(0.55..1.0),
    }
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.data.iter().zip(&b.data).filter(|(x, y)| **x & **y != 0).count()
}

pub fn generate_synthetic_shapes(
    num_images: usize,
    image_size: usize,
    num_classes: usize,
    max_instances: usize,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    if !(2..=SHAPE_NAMES.len()).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be in 2..={}, got {num_classes}",
            SHAPE_NAMES.len()
        )));
    }
    if image_size < 32 {
        return Err(Error::Config(format!(
            "image_size must be ≥ 32, got {image_size}"
        )));
    }
    if max_instances < 1 {
        return Err(Error::Config("max_instances must be ≥ 1".into()));
    }
    (0..num_images)
        .map(|i| {
            let mut rng = rng::stream(seed, "synthetic", i as u64);
            let rec = generate_one(
                &mut rng,
                format!("syn{seed}_{i:05}"),
                image_size,
                num_classes,
                max_instances,
            );
            debug_assert!(rec.validate().is_ok());
            Ok(rec)
        })
        .collect()
}

fn generate_one<R: Rng>(
    rng: &mut R,
    id: String,
    size: usize,
    num_classes: usize,
    max_instances: usize,
) -> ImageRecord {
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut pixels = vec![0.0f32; size * size * 3];

    // background: low-saturation gradient between two colours
    let c0 = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.35), rng.random_range(0.15..0.85));
    let c1 = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.35), rng.random_range(0.15..0.85));
    let dir = rng.random_range(0.0..2.0 * PI);
    let (ds, dc) = dir.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + ((x as f32 / size as f32 - 0.5) * dc + (y as f32 / size as f32 - 0.5) * ds) * 0.7;
            for ch in 0..3 {
                pixels[(y * size + x) * 3 + ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let col = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.5), rng.random_range(0.1..0.9));
        let (x0, y0) = (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32));
        let a = rng.random_range(0.0..PI);
        let len = rng.random_range(0.2..0.8) * size as f32;
        let steps = (len * 2.0) as usize;
        for k in 0..steps {
            let t = k as f32 / 2.0;
            let (x, y) = (x0 + t * a.cos(), y0 + t * a.sin());
            if x >= 0.0 && y >= 0.0 && (x as usize) < size && (y as usize) < size {
                let p = (y as usize * size + x as usize) * 3;
                pixels[p..p + 3].copy_from_slice(&col);
            }
        }
    }

    let target = rng.random_range(1..=max_instances);
    let mut shapes: Vec<(Shape, BinaryMask)> = Vec::new();
    for _ in 0..target {
        let class = rng.random_range(0..num_classes);
        for _attempt in 0..20 {
            let shape = sample_shape(rng, class, size);
            let full = shape.rasterize(size);
            if full.area() < MIN_VISIBLE_AREA * 2 {
                continue;
            }
            let ok = shapes.iter().all(|(_, vis)| {
                let hidden = overlap(vis, &full);
                (vis.area() - hidden) >= MIN_VISIBLE_AREA
                    && (hidden as f32) <= MAX_OCCLUSION * vis.area() as f32
            });
            if ok {
                for (_, vis) in shapes.iter_mut() {
                    for (v, f) in vis.data.iter_mut().zip(&full.data) {
                        *v &= 1 - f;
                    }
                }
                shapes.push((shape, full));
                break;
            }
        }
    }
    if shapes.is_empty() {
        // fall back to a single centred shape so every image has an instance
        let class = rng.random_range(0..num_classes);
        let shape = Shape {
            class,
            cx: size as f32 / 2.0,
            cy: size as f32 / 2.0,
            radius: size as f32 * 0.2,
            angle: rng.random_range(0.0..2.0 * PI),
            aspect: 0.8,
        };
        let full = shape.rasterize(size);
        shapes.push((shape, full));
    }

    // paint back to front so later shapes cover earlier ones
    for (shape, _) in &shapes {
        let base_hue = shape.class as f32 / num_classes as f32;
        let hue = base_hue + rng.random_range(-0.22..0.22);
        let col = hsv_to_rgb(hue, rng.random_range(0.4..0.9), rng.random_range(0.45..0.95));
        let texture = 0.02 + 0.02 * (shape.class % 3) as f32;
        let full = shape.rasterize(size);
        for y in 0..size {
            for x in 0..size {
                if full.get(x, y) {
                    let p = (y * size + x) * 3;
                    let n = texture * noise.sample(rng);
                    for ch in 0..3 {
                        pixels[p + ch] = col[ch] + n;
                    }
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = (*v + 0.03 * noise.sample(rng)).clamp(0.0, 1.0);
    }

    let annotations = shapes
        .into_iter()
        .filter_map(|(shape, vis)| {
            let bbox = vis.tight_box()?;
            Some(InstanceAnnotation {
                category_id: shape.class,
                bbox,
                mask: vis,
            })
        })
        .collect();
    ImageRecord {
        id,
        width: size,
        height: size,
        pixels,
        annotations,
    }
}
