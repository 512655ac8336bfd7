use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Detection;
use crate::datagen::{ImageSample, Mask};
use crate::detector::BBox;
use crate::error::{Error, Result};

/// Geometry compared by [`iou`].
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Box(BBox),
    Mask(&'a Mask),
}

/// Intersection over union; pixel counts for masks. Two empty regions give 0.
pub fn iou(a: Region, b: Region) -> Result<f64> {
    match (a, b) {
        (Region::Box(a), Region::Box(b)) => Ok(a.iou(&b)),
        (Region::Mask(a), Region::Mask(b)) => {
            if (a.width, a.height) != (b.width, b.height) {
                return Err(Error::Dimension(format!(
                    "masks of {}×{} and {}×{} images",
                    a.width, a.height, b.width, b.height
                )));
            }
            Ok(a.iou(b))
        }
        _ => Err(Error::Dimension("cannot compare a box with a mask".into())),
    }
}

/// A ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Option<Mask>,
}

pub fn ground_truth(samples: &[&ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| GroundTruth {
                image_id: s.id.clone(),
                class_id: a.class_id,
                bbox: a.bbox,
                mask: Some(a.mask.clone()),
            })
        })
        .collect()
}

/// Outcome of one detection during matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub tp: bool,
    /// Best IoU against any GT of the class in the image.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<usize, ClassAp>,
    /// Mean over the included classes with at least one GT.
    pub map: f64,
    pub iou_threshold: f64,
    pub mask_iou: bool,
    pub interpolation: String,
    /// Included classes without GT; left out of `map`.
    pub excluded: Vec<usize>,
    pub matches: Vec<MatchRecord>,
}

impl ApReport {
    /// Mean AP over the subset of `classes` that has GT.
    pub fn mean_over(&self, classes: &[usize]) -> f64 {
        // summed in class-id order so the mean ignores list order
        let ids: std::collections::BTreeSet<usize> = classes.iter().copied().collect();
        let aps: Vec<f64> = ids
            .iter()
            .filter_map(|c| self.per_class.get(c))
            .filter(|c| c.num_gt > 0)
            .map(|c| c.ap)
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

/// All-points interpolated AP from the TP flags of detections sorted by
/// descending score; PR points are taken after each group of equal scores.
pub fn ap_from_ranked(scores: &[f64], tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // (true positives, detections) at each distinct threshold
    let mut points: Vec<(usize, usize)> = Vec::new();
    let mut ntp = 0;
    for i in 0..scores.len() {
        ntp += tp[i] as usize;
        if i + 1 == scores.len() || scores[i + 1] != scores[i] {
            points.push((ntp, i + 1));
        }
    }
    // interpolated precision: running max from the right
    let mut best = vec![0.0f64; points.len()];
    let mut run = 0.0f64;
    for (i, &(t, n)) in points.iter().enumerate().rev() {
        run = run.max(t as f64 / n as f64);
        best[i] = run;
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (i, &(t, _)) in points.iter().enumerate() {
        if t > prev_tp {
            ap += (t - prev_tp) as f64 / num_gt as f64 * best[i];
            prev_tp = t;
        }
    }
    ap
}

/// Greedy matching in descending score order (ties keep input order): each
/// detection takes the unmatched GT of its class and image with the highest
/// IoU, and is a true positive iff that IoU ≥ `iou_threshold`.
pub fn average_precision(
    detections: &[Detection],
    gts: &[GroundTruth],
    classes: &[usize],
    iou_threshold: f64,
    use_mask_iou: bool,
) -> Result<ApReport> {
    if let Some(d) = detections.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::Numerical(format!("detection in {} has score {}", d.image_id, d.score)));
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut matches = Vec::new();
    for &c in classes {
        let mut order: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut by_image: BTreeMap<&str, Vec<(&GroundTruth, bool)>> = BTreeMap::new();
        let mut num_gt = 0;
        for g in gts.iter().filter(|g| g.class_id == c) {
            by_image.entry(g.image_id.as_str()).or_default().push((g, false));
            num_gt += 1;
        }
        let mut tps = Vec::with_capacity(order.len());
        for d in &order {
            let mut best: Option<(usize, f64)> = None;
            let mut best_any = 0.0f64;
            if let Some(list) = by_image.get(d.image_id.as_str()) {
                for (k, (g, used)) in list.iter().enumerate() {
                    let o = overlap(d, g, use_mask_iou)?;
                    best_any = best_any.max(o);
                    if !used && best.is_none_or(|b| o > b.1) {
                        best = Some((k, o));
                    }
                }
            }
            let tp = match best {
                Some((k, o)) if o >= iou_threshold => {
                    by_image.get_mut(d.image_id.as_str()).expect("image present")[k].1 = true;
                    true
                }
                _ => false,
            };
            tps.push(tp);
            matches.push(MatchRecord {
                image_id: d.image_id.clone(),
                class_id: c,
                score: d.score,
                tp,
                iou: best_any,
            });
        }
        if num_gt == 0 {
            log::warn!("class {c} has no ground truth and is excluded from mAP");
            excluded.push(c);
        }
        let scores: Vec<f64> = order.iter().map(|d| d.score).collect();
        per_class.insert(
            c,
            ClassAp {
                ap: ap_from_ranked(&scores, &tps, num_gt),
                num_gt,
                num_detections: order.len(),
            },
        );
    }
    let mut report = ApReport {
        per_class,
        map: 0.0,
        iou_threshold,
        mask_iou: use_mask_iou,
        interpolation: "all-points".into(),
        excluded,
        matches,
    };
    report.map = report.mean_over(classes);
    Ok(report)
}

fn overlap(d: &Detection, g: &GroundTruth, use_mask: bool) -> Result<f64> {
    if !use_mask {
        return Ok(d.bbox.iou(&g.bbox));
    }
    match (&d.mask, &g.mask) {
        (Some(a), Some(b)) => iou(Region::Mask(a), Region::Mask(b)),
        _ => Err(Error::Config(format!("mask IoU requested but a mask is missing in image {}", d.image_id))),
    }
}
