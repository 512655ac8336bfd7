//! Axis-aligned boxes, the R-CNN delta parameterization, and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in pixel coordinates; `(x1, y1)` inclusive corner, `(x2, y2)` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Largest log-scale change a decoded delta may apply.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; zero when both boxes are empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Regression targets `(dx, dy, dw, dh)` taking `reference` onto `gt`.
pub fn box_encode(gt: &BBox, reference: &BBox) -> Result<[f64; 4]> {
    if reference.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("reference {reference:?} has no area")));
    }
    if gt.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("target {gt:?} has no area")));
    }
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (gx, gy) = gt.center();
    Ok([
        (gx - rx) / rw,
        (gy - ry) / rh,
        (gt.width() / rw).ln(),
        (gt.height() / rh).ln(),
    ])
}

/// Applies deltas to `reference`, optionally clamping to `(width, height)`.
pub fn box_decode(deltas: [f64; 4], reference: &BBox, clip_to: Option<(f64, f64)>) -> Result<BBox> {
    if reference.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("reference {reference:?} has no area")));
    }
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = rh * deltas[3].min(MAX_LOG_SCALE).exp();
    let b = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    Ok(match clip_to {
        Some((iw, ih)) => b.clip(iw, ih),
        None => b,
    })
}

/// Greedy suppression: visit by descending score (ties by lower index), drop
/// any box whose IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
