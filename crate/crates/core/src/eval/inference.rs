use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::datagen::{ImageSample, Mask, RgbImage, ShotRef};
use crate::datagen::FewShotRegistry;
use crate::detector::{
    backbone_forward, box_decode, mask_features, mask_head, nms, predictor_head, remodel_mask_features, roi_features,
    rpn_forward, rpn_propose, BBox, Bound, HeadKind, Model,
};
use crate::error::{Error, Result};
use crate::meta_train::DataView;
use crate::prn::{aggregate_class_bank, infer_object_vectors, remodel_rois, ClassAttentiveBank};
use crate::tensor::{Graph, Tensor, Var};

/// One scored, labeled box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    /// Minimum winning-class foreground probability.
    pub score_threshold: f64,
    /// Per-class NMS IoU.
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Attend a pooled whole-image feature instead of per-RoI features.
    pub full_image: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            full_image: false,
        }
    }
}

/// How the RoI features reach the head.
#[derive(Debug, Clone, Copy)]
pub enum Attending<'b> {
    /// One attended pass per class of the bank.
    Bank(&'b ClassAttentiveBank),
    /// A single unattended pass. A binary head then scores generic
    /// objectness and its detections carry class 0.
    Plain,
}

/// Raw head outputs of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub rois: Vec<BBox>,
    /// Class ids of the column blocks; empty for a plain pass.
    pub classes: Vec<usize>,
    /// `k×(R·n)`: block `b` holds the RoIs attended with `classes[b]`.
    pub cls_logits: Tensor<f32>,
    pub box_deltas: Tensor<f32>,
}

/// Averages the first `k` registry shots of every registry class into a bank.
pub fn build_bank(model: &Model, data: &DataView, registry: &FewShotRegistry, k: usize, use_mask: bool) -> Result<ClassAttentiveBank> {
    if !model.spec.prn {
        return Err(Error::Config("a bank needs a model with a PRN".into()));
    }
    let mut inputs = Vec::new();
    for c in registry.classes() {
        let shots: Vec<&ShotRef> = registry.shots(c)?.iter().take(k).collect();
        if shots.len() != k {
            return Err(Error::ShotCount(format!("class {c} has {} registry shots, expected K = {k}", shots.len())));
        }
        for r in shots {
            inputs.push(data.meta_input(r, model.spec.detector.meta_input_size, use_mask)?);
        }
    }
    let vectors = infer_object_vectors(&model.params, &model.spec, &inputs)?;
    aggregate_class_bank(&vectors, k, &format!("registry phase {} K={}", u8::from(registry.phase), registry.k))
}

struct Forward {
    g: Graph<f32>,
    p: Bound,
    fm: crate::detector::FeatureMap,
    rois: Vec<BBox>,
    /// Per-class attentive vectors, in `classes` order.
    vectors: Vec<Var>,
    classes: Vec<usize>,
    cls_logits: Var,
    box_deltas: Var,
}

fn forward(model: &Model, image: &RgbImage, attending: Attending, classes: &[usize], opts: &InferenceOptions) -> Result<Forward> {
    let spec = &model.spec;
    let cfg = &spec.detector;
    let mut g = Graph::<f32>::inference();
    let p = Bound::bind_frozen(&mut g, &model.params);
    let t: Tensor<f32> = image.to_tensor();
    let x = g.constant(t.reshape(&[1, 3, image.height, image.width])?);
    let fm = backbone_forward(&mut g, &p, x)?;
    let rpn = rpn_forward(&mut g, &p, &fm, cfg)?;
    let size = (image.width as f64, image.height as f64);
    let props = rpn_propose(&g, &rpn, size, cfg.rpn_pre_nms_top, cfg.rpn_test_post_nms_top, cfg.rpn_nms_iou)?;
    let rois: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    if rois.is_empty() {
        return Err(Error::EmptyBatch("no proposals survive decoding".into()));
    }
    let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.to_array()).collect();
    let z = roi_features(&mut g, &p, &fm, &boxes, cfg)?;
    let zin = if opts.full_image {
        let c = cfg.channels;
        let pooled = g.global_avg_pool(fm.var)?;
        let pooled = g.reshape(pooled, &[c])?;
        g.broadcast_along(pooled, &[c, rois.len()], 0)?
    } else {
        z
    };
    let (feats, vectors, classes) = match (spec.head, attending) {
        (HeadKind::Binary, Attending::Bank(bank)) => {
            if classes.is_empty() {
                return Err(Error::Config("no classes to detect".into()));
            }
            bank.require(classes)?;
            let mut vectors = Vec::with_capacity(classes.len());
            let mut blocks = Vec::with_capacity(classes.len());
            for &c in classes {
                let v = g.constant(Tensor::from_vec(&[cfg.channels, 1], bank.get(c)?.to_vec()));
                blocks.push(remodel_rois(&mut g, zin, v, cfg.fusion)?);
                vectors.push(v);
            }
            (g.concat(&blocks, 1)?, vectors, classes.to_vec())
        }
        (HeadKind::Softmax, Attending::Bank(_)) => {
            return Err(Error::Config("a softmax-head model takes no bank".into()));
        }
        (_, Attending::Plain) => (zin, Vec::new(), Vec::new()),
    };
    let out = predictor_head(&mut g, &p, feats, None)?;
    Ok(Forward {
        g,
        p,
        fm,
        rois,
        vectors,
        classes,
        cls_logits: out.cls_logits,
        box_deltas: out.box_deltas,
    })
}

/// Head logits and deltas for every proposal, without post-processing.
pub fn forward_raw(model: &Model, image: &RgbImage, attending: Attending, classes: &[usize], opts: &InferenceOptions) -> Result<RawOutput> {
    let f = forward(model, image, attending, classes, opts)?;
    Ok(RawOutput {
        cls_logits: f.g.value(f.cls_logits).clone(),
        box_deltas: f.g.value(f.box_deltas).clone(),
        rois: f.rois,
        classes: f.classes,
    })
}

fn softmax_col(logits: &[f32], cols: usize, col: usize, rows: usize) -> Vec<f64> {
    let vals: Vec<f64> = (0..rows).map(|i| logits[i * cols + col] as f64).collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The highest-scoring `(class, score)`, ties to the lower class id.
pub fn pick_class(scores: impl IntoIterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    scores
        .into_iter()
        .fold(None, |best: Option<(usize, f64)>, (c, s)| match best {
            Some(b) if b.1 > s || (b.1 == s && b.0 < c) => Some(b),
            _ => Some((c, s)),
        })
}

/// Detections for one image. Each RoI takes the class whose branch gives
/// the highest foreground probability (ties to the lower class id), is kept
/// at or above the score threshold, and is decoded from that branch; NMS
/// then runs per class.
pub fn run_inference(
    model: &Model,
    sample_id: &str,
    image: &RgbImage,
    attending: Attending,
    classes: &[usize],
    opts: &InferenceOptions,
) -> Result<Vec<Detection>> {
    let mut f = forward(model, image, attending, classes, opts)?;
    let cfg = &model.spec.detector;
    let r = f.rois.len();
    let logits = f.g.value(f.cls_logits).data().to_vec();
    let deltas = f.g.value(f.box_deltas).data().to_vec();
    let cols = f.g.shape(f.cls_logits)[1];
    let rows = f.g.shape(f.cls_logits)[0];
    let size = (image.width as f64, image.height as f64);

    // (class, score, column, block)
    let mut cands: Vec<(usize, f64, usize, usize)> = Vec::new();
    for j in 0..r {
        let best = match model.spec.head {
            HeadKind::Binary if f.classes.is_empty() => Some((0, softmax_col(&logits, cols, j, rows)[1], j, 0)),
            HeadKind::Binary => {
                let scores = f.classes.iter().enumerate().map(|(b, &c)| (c, softmax_col(&logits, cols, b * r + j, rows)[1]));
                pick_class(scores).map(|(c, s)| {
                    let b = f.classes.iter().position(|&x| x == c).unwrap_or(0);
                    (c, s, b * r + j, b)
                })
            }
            HeadKind::Softmax => {
                let probs = softmax_col(&logits, cols, j, rows);
                if let Some(&c) = classes.iter().find(|&&c| c + 1 >= rows) {
                    return Err(Error::Index(format!("class {c} is outside the {}-way head", rows - 1)));
                }
                pick_class(classes.iter().map(|&c| (c, probs[c + 1]))).map(|(c, s)| (c, s, j, 0))
            }
        };
        if let Some(b) = best.filter(|b| b.1 >= opts.score_threshold) {
            cands.push(b);
        }
    }

    let mut dets: Vec<(Detection, usize)> = Vec::new();
    for &(c, s, col, block) in &cands {
        let d = [0, 1, 2, 3].map(|k| deltas[k * cols + col] as f64 * cfg.box_std[k]);
        let b = box_decode(d, &f.rois[col % r], Some(size))?;
        if b.width() >= 1.0 && b.height() >= 1.0 {
            let det = Detection {
                image_id: sample_id.to_string(),
                class_id: c,
                score: s,
                bbox: b,
                mask: None,
            };
            dets.push((det, block));
        }
    }
    let mut kept: Vec<(Detection, usize)> = Vec::new();
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, (d, _)) in dets.iter().enumerate() {
        by_class.entry(d.class_id).or_default().push(i);
    }
    for idx in by_class.values() {
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].0.bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].0.score).collect();
        for k in nms(&boxes, &scores, opts.nms_iou) {
            kept.push(dets[idx[k]].clone());
        }
    }
    kept.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.0.class_id.cmp(&b.0.class_id)));
    kept.truncate(opts.max_detections);

    if cfg.mask && !kept.is_empty() {
        attach_masks(&mut f, model, &mut kept, image)?;
    }
    Ok(kept.into_iter().map(|(d, _)| d).collect())
}

fn attach_masks(f: &mut Forward, model: &Model, kept: &mut [(Detection, usize)], image: &RgbImage) -> Result<()> {
    let cfg = &model.spec.detector;
    let m = cfg.mask_size;
    let mut blocks: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, (_, b)) in kept.iter().enumerate() {
        blocks.entry(*b).or_default().push(i);
    }
    for (block, idx) in blocks {
        let boxes: Vec<[f64; 4]> = idx.iter().map(|&i| kept[i].0.bbox.to_array()).collect();
        let x = mask_features(&mut f.g, &f.fm, &boxes, cfg)?;
        let x = match f.vectors.get(block) {
            Some(&v) => remodel_mask_features(&mut f.g, x, v, cfg.fusion)?,
            None if model.spec.head == HeadKind::Binary && !f.vectors.is_empty() => {
                return Err(Error::Index(format!("no vector for block {block}")))
            }
            None => x,
        };
        let logits = mask_head(&mut f.g, &f.p, x)?;
        let vals = f.g.value(logits).data().to_vec();
        for (n, &i) in idx.iter().enumerate() {
            let grid = &vals[n * m * m..(n + 1) * m * m];
            kept[i].0.mask = Some(paste_mask(grid, m, &kept[i].0.bbox, image.width, image.height));
        }
    }
    Ok(())
}

/// Nearest-cell paste of an `m×m` logit grid over `bbox`, thresholded at
/// probability 0.5.
pub fn paste_mask(grid: &[f32], m: usize, bbox: &BBox, width: usize, height: usize) -> Mask {
    let (bw, bh) = (bbox.width() / m as f64, bbox.height() / m as f64);
    Mask::from_fn(width, height, |x, y| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        if cx < bbox.x1 || cx >= bbox.x2 || cy < bbox.y1 || cy >= bbox.y2 {
            return false;
        }
        let j = (((cx - bbox.x1) / bw) as usize).min(m - 1);
        let i = (((cy - bbox.y1) / bh) as usize).min(m - 1);
        grid[i * m + j] >= 0.0
    })
}

/// Inference over a set of images.
pub fn detect_all(
    model: &Model,
    samples: &[&ImageSample],
    attending: Attending,
    classes: &[usize],
    opts: &InferenceOptions,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(run_inference(model, &s.id, &s.image, attending, classes, opts)?);
    }
    Ok(out)
}
