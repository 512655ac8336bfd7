//! Procedural scenes: textured shapes over a cluttered background.
//!
//! A class is a (shape, texture) pair, so telling classes apart needs both
//! the silhouette and the surface pattern. Annotations are read back from the
//! rendered label map, so boxes and masks are exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSample, Mask, ObjectAnnotation, RgbImage};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const TEXTURES: [&str; 3] = ["solid", "stripes", "checker"];

/// Scene layout parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Cap on pairwise box IoU between objects of one scene.
    pub max_iou: f64,
    /// Object side range as a fraction of the shorter canvas side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Each object keeps at least this fraction of its pixels visible.
    pub min_visible_frac: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 1,
            max_objects: 5,
            max_iou: 0.3,
            min_size_frac: 0.18,
            max_size_frac: 0.38,
            min_visible_frac: 0.6,
            max_retries: 200,
        }
    }
}

pub fn render_class_name(shape: usize, texture: usize) -> String {
    format!("{}_{}", SHAPES[shape], TEXTURES[texture])
}

/// Names for `n` synthetic classes, enumerating shape-major.
pub fn synthetic_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|c| render_class_name(c / TEXTURES.len() % SHAPES.len(), c % TEXTURES.len()))
        .collect()
}

fn shape_contains(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.9 && v.abs() <= 0.9,
        2 => v <= 1.0 && u.abs() <= (v + 1.0) * 0.5,
        _ => u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() <= 0.36 || v.abs() <= 0.36),
    }
}

fn texture_is_primary(texture: usize, lx: usize, ly: usize) -> bool {
    match texture {
        0 => true,
        1 => ((lx + ly) / 4) % 2 == 0,
        _ => (lx / 4 + ly / 4) % 2 == 0,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

struct Placed {
    class_id: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    primary: [u8; 3],
    secondary: [u8; 3],
}

impl Placed {
    fn covers(&self, x: usize, y: usize, shapes: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        let u = ((x - self.x0) as f64 + 0.5) / self.w as f64 * 2.0 - 1.0;
        let v = ((y - self.y0) as f64 + 0.5) / self.h as f64 * 2.0 - 1.0;
        shape_contains((self.class_id / TEXTURES.len()) % shapes, u, v)
    }
}

fn paint_background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width, img.height);
    let base = [rng.gen_range(60..190i32), rng.gen_range(60..190), rng.gen_range(60..190)];
    for y in 0..h {
        for x in 0..w {
            let n = rng.gen_range(-22..=22);
            img.set(x, y, base.map(|b| (b + n).clamp(0, 255) as u8));
        }
    }
    for _ in 0..rng.gen_range(3..7) {
        let col = hsv(rng.gen(), rng.gen_range(0.2..0.8), rng.gen_range(0.3..0.9));
        let (x0, y0) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let len = rng.gen_range(0.2..0.8) * w as f64;
        let steps = len as usize;
        for t in 0..steps {
            let x = x0 + ang.cos() * t as f64;
            let y = y0 + ang.sin() * t as f64;
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                img.set(x as usize, y as usize, col);
            }
        }
    }
    for _ in 0..rng.gen_range(4..10) {
        let col = hsv(rng.gen(), rng.gen_range(0.2..0.9), rng.gen_range(0.3..1.0));
        let s = rng.gen_range(2..5);
        let (x0, y0) = (rng.gen_range(0..w.saturating_sub(s).max(1)), rng.gen_range(0..h.saturating_sub(s).max(1)));
        for y in y0..(y0 + s).min(h) {
            for x in x0..(x0 + s).min(w) {
                img.set(x, y, col);
            }
        }
    }
}

/// Renders one scene with `num_objects` objects whose classes are drawn from
/// `class_pool`.
pub fn generate_scene(
    num_objects: usize,
    class_pool: &[usize],
    canvas: (usize, usize),
    rng_seed: u64,
    config: &SceneConfig,
) -> Result<ImageSample> {
    if num_objects == 0 {
        return Err(Error::Config("a scene needs at least one object".into()));
    }
    if class_pool.is_empty() {
        return Err(Error::Config("class pool is empty".into()));
    }
    let mut last_err = None;
    for attempt in 0..8u64 {
        match try_scene(num_objects, class_pool, canvas, rng_seed, attempt, config) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn try_scene(
    num_objects: usize,
    class_pool: &[usize],
    (height, width): (usize, usize),
    seed: u64,
    attempt: u64,
    cfg: &SceneConfig,
) -> Result<ImageSample> {
    let mut rng = rng_for(seed, &[0x5CE2E, attempt]);
    let short = height.min(width) as f64;
    let min_side = (cfg.min_size_frac * short).round().max(4.0) as usize;
    let max_side = ((cfg.max_size_frac * short).round() as usize).max(min_side);
    if min_side >= width || min_side >= height {
        return Err(Error::Placement(format!(
            "canvas {height}×{width} too small for objects of side {min_side}"
        )));
    }

    let mut label: Vec<u8> = vec![u8::MAX; width * height];
    let mut placed: Vec<Placed> = Vec::new();
    let mut full_area: Vec<usize> = Vec::new();
    for _ in 0..num_objects {
        let class_id = class_pool[rng.gen_range(0..class_pool.len())];
        let mut ok = false;
        for _ in 0..cfg.max_retries {
            let side = rng.gen_range(min_side..=max_side) as f64;
            let w = ((side * rng.gen_range(0.87..1.15)).round() as usize).clamp(4, width - 1);
            let h = ((side * rng.gen_range(0.87..1.15)).round() as usize).clamp(4, height - 1);
            let cand = Placed {
                class_id,
                x0: rng.gen_range(0..=width - w),
                y0: rng.gen_range(0..=height - h),
                w,
                h,
                primary: hsv(rng.gen(), rng.gen_range(0.55..1.0), rng.gen_range(0.6..1.0)),
                secondary: [0; 3],
            };
            let cbox = crate::detector::boxes::BBox::new(
                cand.x0 as f64,
                cand.y0 as f64,
                (cand.x0 + w) as f64,
                (cand.y0 + h) as f64,
            );
            let overlaps = placed.iter().any(|p| {
                let pb = crate::detector::boxes::BBox::new(
                    p.x0 as f64,
                    p.y0 as f64,
                    (p.x0 + p.w) as f64,
                    (p.y0 + p.h) as f64,
                );
                pb.iou(&cbox) > cfg.max_iou
            });
            if overlaps {
                continue;
            }
            // visibility of earlier objects after this one is painted on top
            let mut covered = vec![0usize; placed.len()];
            let mut area = 0;
            for y in cand.y0..cand.y0 + h {
                for x in cand.x0..cand.x0 + w {
                    if cand.covers(x, y, SHAPES.len()) {
                        area += 1;
                        let l = label[y * width + x];
                        if l != u8::MAX {
                            covered[l as usize] += 1;
                        }
                    }
                }
            }
            let visible_ok = placed.iter().enumerate().all(|(i, _)| {
                let vis = (0..width * height).filter(|&p| label[p] == i as u8).count() - covered[i];
                vis as f64 >= cfg.min_visible_frac * full_area[i] as f64
            });
            if !visible_ok || area == 0 {
                continue;
            }
            let mut cand = cand;
            cand.secondary = cand.primary.map(|c| (c as f64 * 0.3) as u8);
            let idx = placed.len() as u8;
            for y in cand.y0..cand.y0 + h {
                for x in cand.x0..cand.x0 + w {
                    if cand.covers(x, y, SHAPES.len()) {
                        label[y * width + x] = idx;
                    }
                }
            }
            full_area.push(area);
            placed.push(cand);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Placement(format!(
                "could not place object {} of {} on a {height}×{width} canvas after {} retries",
                placed.len() + 1,
                num_objects,
                cfg.max_retries
            )));
        }
    }

    let mut image = RgbImage::new(width, height);
    paint_background(&mut image, &mut rng);
    for y in 0..height {
        for x in 0..width {
            let l = label[y * width + x];
            if l == u8::MAX {
                continue;
            }
            let p = &placed[l as usize];
            let texture = p.class_id % TEXTURES.len();
            let col = if texture_is_primary(texture, x - p.x0, y - p.y0) {
                p.primary
            } else {
                p.secondary
            };
            image.set(x, y, col);
        }
    }

    let annotations: Vec<ObjectAnnotation> = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mask = Mask::from_fn(width, height, |x, y| label[y * width + x] == i as u8);
            let bbox = mask.tight_box().expect("visible objects have pixels");
            ObjectAnnotation {
                class_id: p.class_id,
                bbox,
                mask,
            }
        })
        .collect();
    for i in 0..annotations.len() {
        for j in i + 1..annotations.len() {
            if annotations[i].bbox.iou(&annotations[j].bbox) > cfg.max_iou {
                return Err(Error::Placement("occlusion pushed a box pair over the IoU cap".into()));
            }
        }
    }
    Ok(ImageSample {
        id: format!("s{seed:016x}"),
        image,
        annotations,
    })
}

/// `count` scenes over the class universe `0..num_classes`, each a pure
/// function of `(seed, index)`.
pub fn generate_dataset(
    count: usize,
    num_classes: usize,
    canvas: (usize, usize),
    seed: u64,
    config: &SceneConfig,
    id_prefix: &str,
) -> Result<Dataset> {
    if num_classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    if config.min_objects == 0 || config.max_objects < config.min_objects {
        return Err(Error::Config(format!(
            "object count range {}..={} is invalid",
            config.min_objects, config.max_objects
        )));
    }
    let pool: Vec<usize> = (0..num_classes).collect();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = crate::rng::derive(seed, &[0xDA7A, i as u64]);
        let mut rng = rng_for(s, &[1]);
        let n = rng.gen_range(config.min_objects..=config.max_objects);
        let mut sample = generate_scene(n, &pool, canvas, s, config)?;
        sample.id = format!("{id_prefix}{i:05}");
        samples.push(sample);
    }
    Ok(Dataset {
        class_names: synthetic_class_names(num_classes),
        samples,
        rng_seed: seed,
    })
}
