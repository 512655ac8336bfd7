//! Inference with precomputed class banks, AP/mAP with box or mask IoU,
//! attentive-vector statistics, and adaptation curves.

mod ap;
mod curve;
mod inference;
mod vectors;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ap::{ap_from_ranked, average_precision, ground_truth, iou, ApReport, ClassAp, GroundTruth, MatchRecord, Region};
pub use curve::{adaptation_curve, AdaptationCurve};
pub use inference::{
    build_bank, detect_all, forward_raw, paste_mask, pick_class, run_inference, Attending, Detection, InferenceOptions, RawOutput,
};
pub use vectors::{attentive_vector_report, cosine, export_vectors, ClassVectorStats, VectorReport};

use crate::datagen::{mask_to_rle, ClassSplit, ImageSample};
use crate::detector::{HeadKind, Model};
use crate::error::{Error, Result};

/// Class subset a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    All,
    Base,
    Novel,
}

impl ClassFilter {
    pub fn select(self, split: &ClassSplit) -> Vec<usize> {
        match self {
            ClassFilter::All => split.all_classes(),
            ClassFilter::Base => split.base_classes.iter().copied().collect(),
            ClassFilter::Novel => split.novel_classes.iter().copied().collect(),
        }
    }
}

/// Box AP (and mask AP when the model predicts masks) over one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<usize>,
    pub box_ap: ApReport,
    pub map_base: f64,
    pub map_novel: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ap: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_map_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_map_novel: Option<f64>,
    pub num_images: usize,
    pub num_detections: usize,
    pub settings: serde_json::Value,
}

/// Runs inference on `samples` and scores it on `classes`.
pub fn evaluate(
    model: &Model,
    samples: &[&ImageSample],
    attending: Attending,
    split: &ClassSplit,
    classes: &[usize],
    opts: &InferenceOptions,
    settings: serde_json::Value,
) -> Result<(Vec<Detection>, EvalReport)> {
    if model.spec.head == HeadKind::Binary && matches!(attending, Attending::Plain) {
        return Err(Error::Config("a binary-head model is evaluated with a bank".into()));
    }
    let dets = detect_all(model, samples, attending, classes, opts)?;
    let gts = ground_truth(samples);
    let box_ap = average_precision(&dets, &gts, classes, 0.5, false)?;
    let base: Vec<usize> = classes.iter().copied().filter(|c| split.is_base(*c)).collect();
    let novel: Vec<usize> = classes.iter().copied().filter(|c| split.is_novel(*c)).collect();
    let mask_ap = if model.spec.detector.mask {
        Some(average_precision(&dets, &gts, classes, 0.5, true)?)
    } else {
        None
    };
    let report = EvalReport {
        classes: classes.to_vec(),
        map_base: box_ap.mean_over(&base),
        map_novel: box_ap.mean_over(&novel),
        mask_map_base: mask_ap.as_ref().map(|r| r.mean_over(&base)),
        mask_map_novel: mask_ap.as_ref().map(|r| r.mean_over(&novel)),
        box_ap,
        mask_ap,
        num_images: samples.len(),
        num_detections: dets.len(),
        settings,
    };
    Ok((dets, report))
}

/// One JSON object per line: `{image_id, class, score, bbox, mask_rle?}`,
/// after an optional `{"provenance": …}` header line.
pub fn write_detections(
    dets: &[Detection],
    class_names: &[String],
    path: &Path,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    if let Some(p) = provenance {
        writeln!(w, "{}", serde_json::json!({ "provenance": p })).map_err(|e| Error::io(path, e))?;
    }
    for d in dets {
        let mut v = serde_json::json!({
            "image_id": d.image_id,
            "class": class_names.get(d.class_id).cloned().unwrap_or_else(|| d.class_id.to_string()),
            "score": d.score,
            "bbox": d.bbox.to_array(),
        });
        if let Some(m) = &d.mask {
            v["mask_rle"] = serde_json::to_value(mask_to_rle(m))?;
        }
        writeln!(w, "{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean per-image inference time with the bank against a single
/// unattended pass of the same model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub images: usize,
    pub repeats: usize,
    pub attended_ms: f64,
    pub plain_ms: f64,
    pub overhead_ratio: f64,
}

/// Alternates the two modes image by image and keeps, per mode, the
/// fastest of `repeats` passes over `samples`.
pub fn time_inference(
    model: &Model,
    samples: &[&ImageSample],
    attended: Attending,
    plain: (&Model, Attending),
    classes: &[usize],
    opts: &InferenceOptions,
    repeats: usize,
) -> Result<TimingReport> {
    if samples.is_empty() || repeats == 0 {
        return Err(Error::Config("timing needs at least one image and one repeat".into()));
    }
    let (mut best_a, mut best_p) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats {
        let (mut ta, mut tp) = (0.0, 0.0);
        for (i, s) in samples.iter().enumerate() {
            let run_a = || -> Result<f64> {
                let t = Instant::now();
                run_inference(model, &s.id, &s.image, attended, classes, opts)?;
                Ok(t.elapsed().as_secs_f64())
            };
            let run_p = || -> Result<f64> {
                let t = Instant::now();
                run_inference(plain.0, &s.id, &s.image, plain.1, classes, opts)?;
                Ok(t.elapsed().as_secs_f64())
            };
            if i % 2 == 0 {
                ta += run_a()?;
                tp += run_p()?;
            } else {
                tp += run_p()?;
                ta += run_a()?;
            }
        }
        best_a = best_a.min(ta);
        best_p = best_p.min(tp);
    }
    let n = samples.len() as f64;
    Ok(TimingReport {
        images: samples.len(),
        repeats,
        attended_ms: best_a / n * 1e3,
        plain_ms: best_p / n * 1e3,
        overhead_ratio: best_a / best_p,
    })
}
