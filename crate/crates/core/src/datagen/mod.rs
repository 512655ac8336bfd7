//! Synthetic multi-object scenes, class splits, K-shot registries, and
//! annotation files.

mod manifest;
mod registry;
mod scene;
pub mod split;

use serde::{Deserialize, Serialize};

use crate::detector::boxes::BBox;
use crate::tensor::{Scalar, Tensor};

pub use manifest::{
    ingest_annotations, load_samples, mask_from_rle, mask_to_rle, write_dataset, AnnotationFormat, DatasetManifest,
    write_diagnostics, Diagnostic, ImageRecord, IngestOutcome, ObjectRecord, Rle, CLASSES_FILE, MANIFEST_FILE,
};
pub use registry::{sample_kshot, FewShotRegistry, Phase, ShotRef};
pub use scene::{generate_dataset, generate_scene, render_class_name, synthetic_class_names, SceneConfig, SHAPES, TEXTURES};
pub use split::{coco_class_names, make_split, voc_class_names, voc_novel_split, ClassSplit, NovelSelector};

/// Planar RGB image, `3×H×W`, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[plane + i] = rgb[1];
        self.data[2 * plane + i] = rgb[2];
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let scale = 1.0 / 255.0;
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| F::c(v as f64 * scale)).collect(),
        )
    }
}

/// Binary mask over a full image, stored as a bitmap cropped to its
/// bounding extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    /// Offset and size of the stored window.
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    /// Builds a mask from a full-image predicate, cropping to the on-pixels.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return Mask {
                width,
                height,
                x0: 0,
                y0: 0,
                w: 0,
                h: 0,
                bits: Vec::new(),
            };
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut bits = Vec::with_capacity(w * h);
        for y in y0..y1 {
            for x in x0..x1 {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            x0,
            y0,
            w,
            h,
            bits,
        }
    }

    /// Rectangle mask filling `bbox` (rounded outward to whole pixels).
    pub fn from_box(width: usize, height: usize, bbox: &BBox) -> Mask {
        let x0 = bbox.x1.floor().max(0.0) as usize;
        let y0 = bbox.y1.floor().max(0.0) as usize;
        let x1 = (bbox.x2.ceil() as usize).min(width);
        let y1 = (bbox.y2.ceil() as usize).min(height);
        Mask::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        self.bits[(y - self.y0) * self.w + (x - self.x0)]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight pixel box around the on-pixels, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        (self.area() > 0).then(|| {
            BBox::new(
                self.x0 as f64,
                self.y0 as f64,
                (self.x0 + self.w) as f64,
                (self.y0 + self.h) as f64,
            )
        })
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        let x1 = (self.x0 + self.w).max(other.x0 + other.w);
        let y1 = (self.y0 + self.h).max(other.y0 + other.h);
        let (mut inter, mut union) = (0usize, 0usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let (a, b) = (self.get(x, y), other.get(x, y));
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// One labeled object: class, box, and structure mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Mask,
}

/// An image with its object annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbImage,
    pub annotations: Vec<ObjectAnnotation>,
}

impl ImageSample {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Images keyed for registry lookups.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
    pub rng_seed: u64,
}

impl Dataset {
    pub fn find(&self, image_id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == image_id)
    }

    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::from_samples(&self.samples, &self.class_names, self.rng_seed)
    }
}
