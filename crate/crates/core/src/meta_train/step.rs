use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::optim::Sgd;
use crate::detector::{
    backbone_forward, detection_losses, mask_features, mask_targets, predictor_head, remodel_mask_features, roi_features,
    rpn_forward, rpn_losses, rpn_propose, rpn_targets, sample_rois, BBox, Bound, HeadKind, Model, ModelSpec, RoiLabel,
    RoiTarget,
};
use crate::error::{Error, Result};
use crate::prn::{meta_loss, object_vectors, remodel_rois, stack_meta_inputs};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// What attends the RoI features of a binary-head model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    /// Object vectors inferred by the PRN from the episode's meta set.
    Prn,
    /// An all-ones vector per class of `c_meta`.
    Ones,
    /// No fusion at all; one pass per class of `c_meta`.
    Unattended,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub attention: Attention,
    /// Attend a globally pooled image feature broadcast to every RoI instead
    /// of the per-RoI features.
    pub full_image: bool,
    /// Weight of `L_meta`; zero disables the term.
    pub meta_loss_weight: f64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            attention: Attention::Prn,
            full_image: false,
            meta_loss_weight: 1.0,
        }
    }
}

/// Loss terms on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub cls: Var,
    pub reg: Var,
    pub mask: Option<Var>,
    pub meta: Option<Var>,
    pub total: Var,
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn_cls: f64,
    pub l_rpn_reg: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mask: Option<f64>,
    pub l_meta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_graph<F: Scalar>(g: &Graph<F>, v: &LossVars) -> Self {
        let s = |x: Var| g.value(x).item().f64();
        LossBreakdown {
            l_rpn_cls: s(v.rpn_cls),
            l_rpn_reg: s(v.rpn_reg),
            l_cls: s(v.cls),
            l_reg: s(v.reg),
            l_mask: v.mask.map(s),
            l_meta: v.meta.map(s).unwrap_or(0.0),
            total: s(v.total),
        }
    }
}

fn image_var<F: Scalar>(g: &mut Graph<F>, ep: &Episode) -> Result<Var> {
    let t: Tensor<F> = ep.sample.image.to_tensor();
    let s = t.shape().to_vec();
    let x = g.constant(t.reshape(&[1, s[0], s[1], s[2]])?);
    Ok(x)
}

/// Full objective of one episode:
/// `L_rpn + L_cls + L_reg + λ·L_mask + w·L_meta`, where the detection terms
/// are averaged over the attending vectors.
pub fn episode_objective<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    spec: &ModelSpec,
    ep: &Episode,
    opts: &ObjectiveOptions,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let cfg = &spec.detector;
    let anns = &ep.sample.annotations;
    let gts: Vec<BBox> = ep.targets.iter().map(|&j| anns[j].bbox).collect();
    let ignore: Vec<BBox> = ep.ignored.iter().map(|&j| anns[j].bbox).collect();
    let size = (ep.sample.width() as f64, ep.sample.height() as f64);

    let x = image_var(g, ep)?;
    let fm = backbone_forward(g, p, x)?;
    let rpn = rpn_forward(g, p, &fm, cfg)?;
    let rt = rpn_targets(&rpn.anchors, fm.height * fm.width, &gts, &ignore, cfg, rng)?;
    let (rpn_cls, rpn_reg) = rpn_losses(g, &rpn, &rt)?;
    let props = rpn_propose(g, &rpn, size, cfg.rpn_pre_nms_top, cfg.rpn_post_nms_top, cfg.rpn_nms_iou)?;
    let prop_boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let rois = sample_rois(&prop_boxes, &gts, &ignore, cfg, rng);
    if rois.is_empty() {
        return Err(Error::EmptyBatch(format!("image {} yields no RoIs", ep.sample.id)));
    }
    let matched: Vec<Option<usize>> = rois
        .labels
        .iter()
        .map(|l| match l {
            RoiLabel::Fg(k) => Some(ep.targets[*k]),
            _ => None,
        })
        .collect();
    let targets: Vec<Option<RoiTarget>> = matched
        .iter()
        .map(|m| {
            m.map(|j| RoiTarget {
                class_id: anns[j].class_id,
                gt: anns[j].bbox,
            })
        })
        .collect();
    let z = roi_features(g, p, &fm, &rois.as_arrays(), cfg)?;

    // Positive RoIs (indices into the sample) whose GT class passes `keep`.
    let positives = |keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
        (0..rois.len())
            .filter(|&r| matched[r].is_some_and(|j| keep(anns[j].class_id)))
            .collect()
    };
    let mask_batch = |g: &mut Graph<F>, pos: &[usize]| -> Result<Option<(Var, Vec<Vec<f64>>)>> {
        if !cfg.mask || pos.is_empty() {
            return Ok(None);
        }
        let boxes: Vec<[f64; 4]> = pos.iter().map(|&r| rois.boxes[r].to_array()).collect();
        let feats = mask_features(g, &fm, &boxes, cfg)?;
        let tgts = pos
            .iter()
            .map(|&r| mask_targets(&anns[matched[r].expect("positive")].mask, &rois.boxes[r], cfg.mask_size))
            .collect();
        Ok(Some((feats, tgts)))
    };

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut mask_terms = Vec::new();
    let mut meta = None;
    match spec.head {
        HeadKind::Softmax => {
            let mb = mask_batch(g, &positives(&|_| true))?;
            let out = predictor_head(g, p, z, mb.as_ref().map(|m| m.0))?;
            let l = detection_losses(
                g,
                &out,
                HeadKind::Softmax,
                None,
                &rois.boxes,
                &targets,
                mb.as_ref().map(|m| m.1.as_slice()),
                cfg.box_std,
            )?;
            cls_terms.push(l.cls);
            reg_terms.push(l.reg);
            mask_terms.extend(l.mask);
        }
        HeadKind::Binary => {
            if ep.c_meta.is_empty() {
                return Err(Error::EmptyBatch(format!("image {} has no meta classes", ep.sample.id)));
            }
            let zin = if opts.full_image {
                let pooled = g.global_avg_pool(fm.var)?;
                let c = cfg.channels;
                let pooled = g.reshape(pooled, &[c])?;
                g.broadcast_along(pooled, &[c, rois.len()], 0)?
            } else {
                z
            };
            // (class, attending vector) pairs
            let attend: Vec<(usize, Option<Var>)> = match opts.attention {
                Attention::Prn => {
                    if ep.meta_inputs.is_empty() {
                        return Err(Error::EmptyBatch(format!("image {} has an empty meta set", ep.sample.id)));
                    }
                    let batch = g.constant(stack_meta_inputs::<F>(&ep.meta_inputs)?);
                    let vecs = object_vectors(g, p, spec, batch)?;
                    let labels: Vec<usize> = ep.meta_inputs.iter().map(|m| m.class_id).collect();
                    if opts.meta_loss_weight > 0.0 {
                        meta = Some(meta_loss(g, p, vecs, &labels)?);
                    }
                    let mut pairs = Vec::with_capacity(labels.len());
                    for (m, &c) in labels.iter().enumerate() {
                        pairs.push((c, Some(g.index_select(vecs, 1, &[m])?)));
                    }
                    pairs
                }
                Attention::Ones => {
                    let ones = g.constant(Tensor::ones(&[cfg.channels, 1]));
                    ep.c_meta.iter().map(|&c| (c, Some(ones))).collect()
                }
                Attention::Unattended => ep.c_meta.iter().map(|&c| (c, None)).collect(),
            };
            let mut class_masks: std::collections::BTreeMap<usize, Option<(Var, Vec<Vec<f64>>)>> = Default::default();
            for &(c, _) in &attend {
                if let std::collections::btree_map::Entry::Vacant(e) = class_masks.entry(c) {
                    e.insert(mask_batch(g, &positives(&|k| k == c))?);
                }
            }
            for (c, v) in attend {
                let feats = match v {
                    Some(v) => remodel_rois(g, zin, v, cfg.fusion)?,
                    None => zin,
                };
                let mb = class_masks[&c].clone();
                let mask_in = match (&mb, v) {
                    (Some((mf, _)), Some(v)) => Some(remodel_mask_features(g, *mf, v, cfg.fusion)?),
                    (Some((mf, _)), None) => Some(*mf),
                    _ => None,
                };
                let out = predictor_head(g, p, feats, mask_in)?;
                let l = detection_losses(
                    g,
                    &out,
                    HeadKind::Binary,
                    Some(c),
                    &rois.boxes,
                    &targets,
                    mb.as_ref().map(|m| m.1.as_slice()),
                    cfg.box_std,
                )?;
                cls_terms.push(l.cls);
                reg_terms.push(l.reg);
                mask_terms.extend(l.mask);
            }
        }
    }
    let mean = |g: &mut Graph<F>, terms: &[Var]| -> Result<Var> {
        let s = g.add_all(terms)?;
        Ok(g.scale(s, F::c(1.0 / terms.len() as f64)))
    };
    let cls = mean(g, &cls_terms)?;
    let reg = mean(g, &reg_terms)?;
    // mask terms are averaged over the vectors that had positives
    let mask = if mask_terms.is_empty() {
        if cfg.mask {
            let zero = g.constant(Tensor::scalar(F::zero()));
            Some(zero)
        } else {
            None
        }
    } else {
        Some(mean(g, &mask_terms)?)
    };
    let mut parts = vec![rpn_cls, rpn_reg, cls, reg];
    parts.extend(mask);
    if let Some(m) = meta {
        parts.push(g.scale(m, F::c(opts.meta_loss_weight)));
    }
    let total = g.add_all(&parts)?;
    Ok(LossVars {
        rpn_cls,
        rpn_reg,
        cls,
        reg,
        mask,
        meta,
        total,
    })
}

/// One SGD update on every parameter; fails on a non-finite loss with the
/// offending component and the first op that produced a non-finite value.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    ep: &Episode,
    opts: &ObjectiveOptions,
    lr: f32,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &model.params, |_| true);
    let vars = episode_objective(&mut g, &p, &model.spec, ep, opts, rng)?;
    let losses = LossBreakdown::from_graph(&g, &vars);
    if !losses.total.is_finite() {
        let component = [
            ("L_rpn_cls", losses.l_rpn_cls),
            ("L_rpn_reg", losses.l_rpn_reg),
            ("L_cls", losses.l_cls),
            ("L_reg", losses.l_reg),
            ("L_mask", losses.l_mask.unwrap_or(0.0)),
            ("L_meta", losses.l_meta),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("total", |(n, _)| *n);
        let op = g.first_non_finite().map_or("unknown", |(_, n)| n);
        return Err(Error::Numerical(format!(
            "iteration {iteration}: {component} is not finite (first non-finite op: {op})"
        )));
    }
    let grads = g.backward(vars.total)?;
    let grads = p.grads(&grads);
    opt.step(&mut model.params, &grads, lr)?;
    Ok(losses)
}
