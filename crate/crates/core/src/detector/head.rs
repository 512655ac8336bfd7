use super::boxes::{box_encode, BBox};
use super::{conv, linear, Bound, DetectorConfig, FeatureMap, HeadKind};
use crate::datagen::Mask;
use crate::error::{Error, Result};
use crate::prn::FusionMode;
use crate::tensor::{Graph, Scalar, Var};

/// Head outputs for `R` RoIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadOutput {
    /// `k×R` class logits: `k = 2` (background, foreground) for the binary
    /// head, `N + 1` for the softmax head.
    pub cls_logits: Var,
    /// `4×R` normalized box deltas.
    pub box_deltas: Var,
    /// `R'×M×M` mask logits for the RoIs given to the mask branch.
    pub mask_logits: Option<Var>,
}

/// Classification and regression from a `D×R` feature matrix, plus mask
/// logits when `mask_input` (`R'×D'×M×M`) is given.
pub fn predictor_head<F: Scalar>(g: &mut Graph<F>, p: &Bound, features: Var, mask_input: Option<Var>) -> Result<HeadOutput> {
    let h = linear(g, p, "head.fc", features)?;
    let h = g.relu(h);
    let cls_logits = linear(g, p, "head.cls", h)?;
    let box_deltas = linear(g, p, "head.box", h)?;
    let mask_logits = match mask_input {
        Some(x) => Some(mask_head(g, p, x)?),
        None => None,
    };
    Ok(HeadOutput {
        cls_logits,
        box_deltas,
        mask_logits,
    })
}

/// `R'×M×M` mask logits from `R'×D'×M×M` features.
pub fn mask_head<F: Scalar>(g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
    let m = conv(g, p, "mask.conv", x, 1, 1)?;
    let m = g.relu(m);
    let m = conv(g, p, "mask.out", m, 1, 0)?;
    let s = g.shape(m).to_vec();
    g.reshape(m, &[s[0], s[2], s[3]])
}

/// `R×C×M×M` RoIAlign features for the mask branch.
pub fn mask_features<F: Scalar>(g: &mut Graph<F>, fm: &FeatureMap, boxes: &[[f64; 4]], cfg: &DetectorConfig) -> Result<Var> {
    g.roi_align(fm.var, boxes, fm.stride as f64, cfg.mask_size)
}

/// Applies an attentive vector `v` (length `C`) to `R×C×M×M` mask features.
pub fn remodel_mask_features<F: Scalar>(g: &mut Graph<F>, x: Var, v: Var, mode: FusionMode) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = shape[1];
    let v = g.reshape(v, &[c])?;
    match mode {
        FusionMode::Channelwise => g.scale_axis(x, v, 1),
        FusionMode::Plus => {
            let b = g.broadcast_along(v, &shape, 1)?;
            g.add(x, b)
        }
        FusionMode::Concat => {
            let b = g.broadcast_along(v, &shape, 1)?;
            g.concat(&[x, b], 1)
        }
    }
}

/// Binary mask target for `roi`: the GT mask sampled at the centers of an
/// `M×M` grid over the RoI.
pub fn mask_targets(mask: &Mask, roi: &BBox, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * m);
    let (bw, bh) = (roi.width() / m as f64, roi.height() / m as f64);
    for i in 0..m {
        for j in 0..m {
            let y = roi.y1 + (i as f64 + 0.5) * bh;
            let x = roi.x1 + (j as f64 + 0.5) * bw;
            let on = x >= 0.0 && y >= 0.0 && mask.get(x as usize, y as usize);
            out.push(if on { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Ground truth an RoI was matched to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub class_id: usize,
    pub gt: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionLosses {
    pub cls: Var,
    pub reg: Var,
    pub mask: Option<Var>,
}

/// Classification label of each RoI. Binary head: 1 iff the RoI's GT class
/// is `attended_class`. Softmax head: GT class + 1, background 0.
pub fn roi_labels(kind: HeadKind, attended_class: Option<usize>, targets: &[Option<RoiTarget>]) -> Vec<usize> {
    targets
        .iter()
        .map(|t| match (kind, t) {
            (_, None) => 0,
            (HeadKind::Binary, Some(t)) => (Some(t.class_id) == attended_class) as usize,
            (HeadKind::Softmax, Some(t)) => t.class_id + 1,
        })
        .collect()
}

/// `L_cls` (softmax CE, mean over RoIs), `L_reg` (smooth-L1 with β = 1 on
/// positive RoIs, divided by `R`) and, when the head produced mask logits,
/// `L_mask` (per-pixel BCE averaged over the positive RoIs in order).
#[allow(clippy::too_many_arguments)]
pub fn detection_losses<F: Scalar>(
    g: &mut Graph<F>,
    out: &HeadOutput,
    kind: HeadKind,
    attended_class: Option<usize>,
    rois: &[BBox],
    targets: &[Option<RoiTarget>],
    mask_targets: Option<&[Vec<f64>]>,
    box_std: [f64; 4],
) -> Result<DetectionLosses> {
    let r = rois.len();
    if r == 0 || targets.len() != r {
        return Err(Error::EmptyBatch(format!("{r} RoIs with {} targets", targets.len())));
    }
    let labels = roi_labels(kind, attended_class, targets);
    let w = vec![F::c(1.0 / r as f64); r];
    let cls = g.cross_entropy_cols(out.cls_logits, &labels, &w)?;

    let mut target = vec![F::zero(); 4 * r];
    let mut weight = vec![F::zero(); 4 * r];
    for (j, (t, &l)) in targets.iter().zip(&labels).enumerate() {
        if let (Some(t), true) = (t, l > 0) {
            let d = box_encode(&t.gt, &rois[j])?;
            for k in 0..4 {
                target[k * r + j] = F::c(d[k] / box_std[k]);
                weight[k * r + j] = F::c(1.0 / r as f64);
            }
        }
    }
    let reg = g.smooth_l1(out.box_deltas, &target, &weight, F::one())?;

    let mask = match (out.mask_logits, mask_targets) {
        (Some(logits), Some(mt)) => {
            let s = g.shape(logits).to_vec();
            if s[0] != mt.len() {
                return Err(Error::Dimension(format!("{} mask logits for {} mask targets", s[0], mt.len())));
            }
            if mt.is_empty() {
                None
            } else {
                let per = s[1] * s[2];
                let flat: Vec<F> = mt.iter().flatten().map(|v| F::c(*v)).collect();
                let wts = vec![F::c(1.0 / (per * mt.len()) as f64); flat.len()];
                Some(g.bce_with_logits(logits, &flat, &wts)?)
            }
        }
        (Some(_), None) => return Err(Error::Config("mask logits without mask targets".into())),
        _ => None,
    };
    Ok(DetectionLosses { cls, reg, mask })
}
