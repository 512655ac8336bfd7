//! Predictor-head remodeling network.
//!
//! A reference object is presented as its full image resized to `S×S` plus a
//! binary structure channel. A PRN-only 4-channel stem feeds the detector
//! trunk (shared parameters by default); global pooling and a sigmoid turn the
//! result into an attentive vector of length `C`. Class-attentive vectors are
//! plain means over `K` object vectors, and fusion with the RoI feature matrix
//! is channelwise multiplication, broadcast addition, or concatenation.

use std::collections::BTreeMap;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::datagen::ImageSample;
use crate::detector::{center_rgb, conv, linear, trunk_forward, Bound, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Channelwise,
    Concat,
    Plus,
}

/// A `4×S×S` PRN input: RGB plus structure label.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaInput {
    pub data: Tensor<f32>,
    pub class_id: usize,
    /// `image_id#annotation_index`.
    pub source: String,
}

/// Resizes the whole image to `size×size` (bilinear) and appends the
/// object's mask, or its box when `use_mask` is false, resized with nearest
/// neighbor.
pub fn build_meta_input(sample: &ImageSample, annotation_index: usize, size: usize, use_mask: bool) -> Result<MetaInput> {
    let ann = sample.annotations.get(annotation_index).ok_or_else(|| {
        Error::Index(format!("image {} has no annotation {annotation_index}", sample.id))
    })?;
    let (w, h) = (sample.width(), sample.height());
    let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
    let plane = size * size;
    let mut data = vec![0.0f32; 4 * plane];
    for i in 0..size {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        let ny = (((i as f64 + 0.5) * sy) as usize).min(h - 1);
        for j in 0..size {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let (p00, p01, p10, p11) = (
                sample.image.get(x0, y0),
                sample.image.get(x1, y0),
                sample.image.get(x0, y1),
                sample.image.get(x1, y1),
            );
            for ch in 0..3 {
                let v = (1.0 - ty) * ((1.0 - tx) * p00[ch] as f64 + tx * p01[ch] as f64)
                    + ty * ((1.0 - tx) * p10[ch] as f64 + tx * p11[ch] as f64);
                data[ch * plane + i * size + j] = (v / 255.0) as f32;
            }
            let nx = (((j as f64 + 0.5) * sx) as usize).min(w - 1);
            let on = if use_mask {
                ann.mask.get(nx, ny)
            } else {
                let (px, py) = (nx as f64 + 0.5, ny as f64 + 0.5);
                px >= ann.bbox.x1 && px < ann.bbox.x2 && py >= ann.bbox.y1 && py < ann.bbox.y2
            };
            data[3 * plane + i * size + j] = on as u8 as f32;
        }
    }
    if data[3 * plane..].iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateBox(format!(
            "object {}#{annotation_index} vanishes when resized to {size}×{size}",
            sample.id
        )));
    }
    Ok(MetaInput {
        data: Tensor::from_vec(&[4, size, size], data),
        class_id: ann.class_id,
        source: format!("{}#{annotation_index}", sample.id),
    })
}

/// Stacks meta inputs into an `M×4×S×S` batch.
pub fn stack_meta_inputs<F: Scalar>(inputs: &[MetaInput]) -> Result<Tensor<F>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::EmptyBatch("no meta inputs".into()))?
        .data
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(inputs.len() * inputs[0].data.len());
    for mi in inputs {
        if mi.data.shape() != first.as_slice() {
            return Err(Error::Dimension(format!("meta input {:?} vs {:?}", mi.data.shape(), first)));
        }
        data.extend(mi.data.data().iter().map(|v| F::c(*v as f64)));
    }
    let mut shape = vec![inputs.len()];
    shape.extend(first);
    Ok(Tensor::from_vec(&shape, data))
}

/// Object vectors `C×M` for an `M×4×S×S` batch: PRN stem, trunk, global
/// average pool, sigmoid.
pub fn object_vectors<F: Scalar>(g: &mut Graph<F>, p: &Bound, spec: &ModelSpec, batch: Var) -> Result<Var> {
    let x = center_rgb(g, batch, 4)?;
    let x = conv(g, p, "prn.stem", x, 2, 1)?;
    let x = g.relu(x);
    let x = trunk_forward(g, p, spec.prn_trunk(), x)?;
    let pooled = g.global_avg_pool(x)?;
    let t = g.transpose(pooled)?;
    Ok(g.sigmoid(t))
}

/// Sigmoid-gated vector of one reference object.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveVector {
    /// `C×1`, every component in `(0, 1)`.
    pub values: Tensor<f32>,
    pub class_id: usize,
    pub source: String,
}

/// Runs the PRN forward-only over `inputs`, in batches of `batch`.
pub fn infer_object_vectors(params: &Params<f32>, spec: &ModelSpec, inputs: &[MetaInput]) -> Result<Vec<AttentiveVector>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(16) {
        let mut g = Graph::<f32>::inference();
        let p = Bound::bind_frozen(&mut g, params);
        let x = g.constant(stack_meta_inputs(chunk)?);
        let v = object_vectors(&mut g, &p, spec, x)?;
        let vals = g.value(v);
        let (c, m) = (vals.shape()[0], vals.shape()[1]);
        for (k, mi) in chunk.iter().enumerate() {
            let col: Vec<f32> = (0..c).map(|i| vals.data()[i * m + k]).collect();
            out.push(AttentiveVector {
                values: Tensor::from_vec(&[c, 1], col),
                class_id: mi.class_id,
                source: mi.source.clone(),
            });
        }
    }
    Ok(out)
}

pub fn infer_object_vector(params: &Params<f32>, spec: &ModelSpec, mi: &MetaInput) -> Result<AttentiveVector> {
    Ok(infer_object_vectors(params, spec, std::slice::from_ref(mi))?.remove(0))
}

/// Class-attentive vectors, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttentiveBank {
    pub entries: BTreeMap<usize, Vec<f32>>,
    pub k: usize,
    /// Which registry and checkpoint produced the bank.
    pub provenance: String,
    pub checkpoint_hash: Option<String>,
}

impl ClassAttentiveBank {
    pub fn get(&self, class_id: usize) -> Result<&[f32]> {
        self.entries
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Bank(format!("bank has no vector for class {class_id}")))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Fails unless every class in `classes` has an entry.
    pub fn require(&self, classes: &[usize]) -> Result<()> {
        let missing: Vec<usize> = classes.iter().copied().filter(|c| !self.entries.contains_key(c)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Bank(format!("bank is missing classes {missing:?}")))
        }
    }

    /// JSON export: `{"classes": {id: [C floats]}, "k": K, "checkpoint_hash": …}`.
    pub fn export(&self, path: &Path) -> Result<()> {
        let classes: BTreeMap<String, &Vec<f32>> = self.entries.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let doc = serde_json::json!({
            "classes": classes,
            "k": self.k,
            "checkpoint_hash": self.checkpoint_hash,
            "provenance": self.provenance,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }
}

/// Per-class mean of exactly `k` object vectors. Components are summed in
/// sorted order, so the result does not depend on input order.
pub fn aggregate_class_bank(vectors: &[AttentiveVector], k: usize, provenance: &str) -> Result<ClassAttentiveBank> {
    let mut groups: BTreeMap<usize, Vec<&AttentiveVector>> = BTreeMap::new();
    for v in vectors {
        groups.entry(v.class_id).or_default().push(v);
    }
    let mut entries = BTreeMap::new();
    for (class, group) in groups {
        if group.len() != k {
            return Err(Error::ShotCount(format!("class {class} has {} vectors, expected K = {k}", group.len())));
        }
        let c = group[0].values.len();
        if let Some(bad) = group.iter().find(|v| v.values.len() != c) {
            return Err(Error::Dimension(format!("vector {} has length {}, expected {c}", bad.source, bad.values.len())));
        }
        let mean: Vec<f32> = (0..c)
            .map(|i| {
                let mut col: Vec<f32> = group.iter().map(|v| v.values.data()[i]).collect();
                col.sort_by(f32::total_cmp);
                (col.iter().map(|x| *x as f64).sum::<f64>() / k as f64) as f32
            })
            .collect();
        entries.insert(class, mean);
    }
    Ok(ClassAttentiveBank {
        entries,
        k,
        provenance: provenance.to_string(),
        checkpoint_hash: None,
    })
}

/// Fuses an attentive vector `v` (length `C`) with the `C×R` RoI matrix.
pub fn remodel_rois<F: Scalar>(g: &mut Graph<F>, z: Var, v: Var, mode: FusionMode) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || g.value(v).len() != shape[0] {
        return Err(Error::Dimension(format!(
            "channelwise_mul: matrix {:?} vs vector {:?}",
            shape,
            g.shape(v)
        )));
    }
    let v = g.reshape(v, &[shape[0]])?;
    match mode {
        FusionMode::Channelwise => g.scale_axis(z, v, 0),
        FusionMode::Plus => {
            let b = g.broadcast_along(v, &shape, 0)?;
            g.add(z, b)
        }
        FusionMode::Concat => {
            let b = g.broadcast_along(v, &shape, 0)?;
            g.concat(&[z, b], 0)
        }
    }
}

/// Fails when the head's input width does not fit `mode`.
pub fn check_fusion(params: &Params<f32>, mode: FusionMode, channels: usize) -> Result<()> {
    let got = params.get("head.fc.w")?.shape()[1];
    let want = if mode == FusionMode::Concat { 2 * channels } else { channels };
    if got != want {
        return Err(Error::Config(format!(
            "fusion {mode:?} needs a head input of {want} channels, the head has {got}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of a linear classifier over `C×M` object vectors.
pub fn meta_loss<F: Scalar>(g: &mut Graph<F>, p: &Bound, vectors: Var, labels: &[usize]) -> Result<Var> {
    let m = g.shape(vectors).get(1).copied().unwrap_or(0);
    if m == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch("meta-loss over zero vectors".into()));
    }
    let logits = linear(g, p, "prn.meta_cls", vectors)?;
    let w = vec![F::c(1.0 / m as f64); m];
    g.cross_entropy_cols(logits, labels, &w)
}
