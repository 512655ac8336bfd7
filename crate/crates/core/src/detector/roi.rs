use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::boxes::BBox;
use super::{linear, Bound, DetectorConfig, FeatureMap};
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

/// Assignment of one RoI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiLabel {
    /// Index of the matched ground-truth object.
    Fg(usize),
    Bg,
    /// Overlaps an object that must not act as foreground or background.
    Ignore,
}

/// Foreground at IoU ≥ `fg_iou` with the best GT (ties → lower index);
/// otherwise ignored when an ignored box reaches `fg_iou`, else background.
pub fn match_rois(rois: &[BBox], gts: &[BBox], ignore: &[BBox], fg_iou: f64) -> Vec<RoiLabel> {
    rois.iter()
        .map(|r| {
            let mut best = (0.0f64, None);
            for (k, gt) in gts.iter().enumerate() {
                let v = r.iou(gt);
                if v > best.0 {
                    best = (v, Some(k));
                }
            }
            match best {
                (v, Some(k)) if v >= fg_iou => RoiLabel::Fg(k),
                _ if ignore.iter().any(|b| r.iou(b) >= fg_iou) => RoiLabel::Ignore,
                _ => RoiLabel::Bg,
            }
        })
        .collect()
}

/// Training RoIs with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRois {
    pub boxes: Vec<BBox>,
    pub labels: Vec<RoiLabel>,
}

impl SampledRois {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_fg(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, RoiLabel::Fg(_))).count()
    }

    pub fn as_arrays(&self) -> Vec<[f64; 4]> {
        self.boxes.iter().map(|b| b.to_array()).collect()
    }
}

/// Proposals plus the GT boxes themselves, matched and subsampled to at most
/// `rois_per_image` with a foreground share of at most `fg_fraction`.
/// Foreground RoIs come first.
pub fn sample_rois(
    proposals: &[BBox],
    gts: &[BBox],
    ignore: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> SampledRois {
    let candidates: Vec<BBox> = proposals
        .iter()
        .chain(gts)
        .copied()
        .filter(|b| b.width() > 0.0 && b.height() > 0.0)
        .collect();
    let labels = match_rois(&candidates, gts, ignore, cfg.fg_iou);
    let mut fg: Vec<usize> = (0..candidates.len()).filter(|&i| matches!(labels[i], RoiLabel::Fg(_))).collect();
    let mut bg: Vec<usize> = (0..candidates.len()).filter(|&i| labels[i] == RoiLabel::Bg).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = (cfg.fg_fraction * cfg.rois_per_image as f64).round() as usize;
    fg.truncate(max_fg);
    bg.truncate(cfg.rois_per_image - fg.len());
    let idx: Vec<usize> = fg.into_iter().chain(bg).collect();
    SampledRois {
        boxes: idx.iter().map(|&i| candidates[i]).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    }
}

/// The RoI feature matrix `C×R`: RoIAlign to `P×P`, 2×2 average pool,
/// linear projection to `C`, ReLU.
pub fn roi_features<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    fm: &FeatureMap,
    boxes: &[[f64; 4]],
    cfg: &DetectorConfig,
) -> Result<Var> {
    let r = boxes.len();
    let x = g.roi_align(fm.var, boxes, fm.stride as f64, cfg.roi_pool)?;
    let x = g.avg_pool2d(x, 2, 2)?;
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[r, s[1] * s[2] * s[3]])?;
    let x = g.transpose(x)?;
    let z = linear(g, p, "roi.fc", x)?;
    Ok(g.relu(z))
}
