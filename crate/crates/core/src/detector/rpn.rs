use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::boxes::{box_decode, box_encode, nms, BBox};
use super::{conv, Bound, DetectorConfig, FeatureMap};
use crate::error::Result;
use crate::tensor::{kernels, Graph, Scalar, Var};

/// A scored candidate box, clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Anchors laid out as `a·H'·W' + i·W' + j`, matching the channel-major
/// layout of the RPN conv outputs.
pub fn generate_anchors(height: usize, width: usize, stride: usize, sizes: &[f64]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(sizes.len() * height * width);
    for &s in sizes {
        for i in 0..height {
            for j in 0..width {
                let cx = (j as f64 + 0.5) * stride as f64;
                let cy = (i as f64 + 0.5) * stride as f64;
                out.push(BBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `1×A×H'×W'` objectness logits.
    pub objectness: Var,
    /// `1×4A×H'×W'` anchor deltas, channel `4a + k`.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
}

pub fn rpn_forward<F: Scalar>(g: &mut Graph<F>, p: &Bound, fm: &FeatureMap, cfg: &DetectorConfig) -> Result<RpnOutput> {
    let h = conv(g, p, "rpn.conv", fm.var, 1, 1)?;
    let h = g.relu(h);
    let objectness = conv(g, p, "rpn.obj", h, 1, 0)?;
    let deltas = conv(g, p, "rpn.delta", h, 1, 0)?;
    Ok(RpnOutput {
        objectness,
        deltas,
        anchors: generate_anchors(fm.height, fm.width, fm.stride, &cfg.anchor_sizes),
    })
}

/// Per-anchor targets and weights, flattened like the conv outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    pub obj_target: Vec<f64>,
    pub obj_weight: Vec<f64>,
    pub delta_target: Vec<f64>,
    pub delta_weight: Vec<f64>,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Positives: IoU ≥ `rpn_pos_iou` or the best anchor of a GT. Negatives: max
/// IoU < `rpn_neg_iou` and no overlap ≥ `rpn_neg_iou` with an ignored box.
/// Up to half of `rpn_batch` is positive.
pub fn rpn_targets(
    anchors: &[BBox],
    hw: usize,
    gts: &[BBox],
    ignore: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RpnTargets> {
    let n = anchors.len();
    let mut label = vec![-1i8; n];
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![0.0f64; n];
    for (i, a) in anchors.iter().enumerate() {
        for (k, gt) in gts.iter().enumerate() {
            let v = a.iou(gt);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = k;
            }
        }
        let near_ignored = ignore.iter().any(|b| a.iou(b) >= cfg.rpn_neg_iou);
        if best_iou[i] >= cfg.rpn_pos_iou {
            label[i] = 1;
        } else if best_iou[i] < cfg.rpn_neg_iou && !near_ignored {
            label[i] = 0;
        }
    }
    for (k, gt) in gts.iter().enumerate() {
        let mut best = (0.0, None);
        for (i, a) in anchors.iter().enumerate() {
            let v = a.iou(gt);
            if v > best.0 {
                best = (v, Some(i));
            }
        }
        if let (v, Some(i)) = best {
            if v > 0.0 {
                label[i] = 1;
                best_gt[i] = k;
            }
        }
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| label[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cfg.rpn_batch / 2);
    neg.truncate(cfg.rpn_batch - pos.len());
    let total = (pos.len() + neg.len()).max(1) as f64;

    let a_count = n / hw.max(1);
    let mut t = RpnTargets {
        obj_target: vec![0.0; n],
        obj_weight: vec![0.0; n],
        delta_target: vec![0.0; 4 * n],
        delta_weight: vec![0.0; 4 * n],
        num_pos: pos.len(),
        num_neg: neg.len(),
    };
    for &i in &neg {
        t.obj_weight[i] = 1.0 / total;
    }
    for &i in &pos {
        t.obj_target[i] = 1.0;
        t.obj_weight[i] = 1.0 / total;
        let d = box_encode(&gts[best_gt[i]], &anchors[i])?;
        let (a, cell) = (i / hw, i % hw);
        debug_assert!(a < a_count);
        for k in 0..4 {
            let idx = (4 * a + k) * hw + cell;
            t.delta_target[idx] = d[k];
            t.delta_weight[idx] = 1.0 / total;
        }
    }
    Ok(t)
}

/// Objectness BCE and smooth-L1 (β = 1/9) on sampled anchors.
pub fn rpn_losses<F: Scalar>(g: &mut Graph<F>, out: &RpnOutput, t: &RpnTargets) -> Result<(Var, Var)> {
    let c = |v: &[f64]| v.iter().map(|x| F::c(*x)).collect::<Vec<F>>();
    let cls = g.bce_with_logits(out.objectness, &c(&t.obj_target), &c(&t.obj_weight))?;
    let reg = g.smooth_l1(out.deltas, &c(&t.delta_target), &c(&t.delta_weight), F::c(1.0 / 9.0))?;
    Ok((cls, reg))
}

/// Decodes all anchors, keeps the `pre_nms_top` highest scoring boxes of
/// side ≥ 1 px, suppresses at `nms_iou`, and returns at most
/// `post_nms_top` proposals sorted by objectness.
#[allow(clippy::too_many_arguments)]
pub fn decode_proposals<F: Scalar>(
    logits: &[F],
    deltas: &[F],
    anchors: &[BBox],
    hw: usize,
    image_size: (f64, f64),
    pre_nms_top: usize,
    post_nms_top: usize,
    nms_iou: f64,
) -> Result<Vec<Proposal>> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| logits[b].f64().total_cmp(&logits[a].f64()).then(a.cmp(&b)));
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &i in order.iter() {
        if boxes.len() >= pre_nms_top {
            break;
        }
        let (a, cell) = (i / hw, i % hw);
        let d = [0, 1, 2, 3].map(|k| deltas[(4 * a + k) * hw + cell].f64());
        let b = box_decode(d, &anchors[i], Some(image_size))?;
        if b.width() >= 1.0 && b.height() >= 1.0 {
            boxes.push(b);
            scores.push(kernels::sigmoid(logits[i].f64()));
        }
    }
    let keep = nms(&boxes, &scores, nms_iou);
    Ok(keep
        .into_iter()
        .take(post_nms_top)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect())
}

pub fn rpn_propose<F: Scalar>(
    g: &Graph<F>,
    out: &RpnOutput,
    image_size: (f64, f64),
    pre_nms_top: usize,
    post_nms_top: usize,
    nms_iou: f64,
) -> Result<Vec<Proposal>> {
    let s = g.shape(out.objectness);
    let hw = s[2] * s[3];
    decode_proposals(
        g.value(out.objectness).data(),
        g.value(out.deltas).data(),
        &out.anchors,
        hw,
        image_size,
        pre_nms_top,
        post_nms_top,
        nms_iou,
    )
}
