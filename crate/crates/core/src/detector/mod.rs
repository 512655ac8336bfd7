//! Miniature two-stage detector: a strided conv backbone, an anchor RPN,
//! RoIAlign features projected to one column per RoI, and a predictor head
//! with an optional mask branch.
//!
//! Model code is generic over [`Scalar`] and runs on a [`Graph`], so the
//! same forward pass trains in `f32` and is gradient-checked in `f64`.

pub mod boxes;
pub mod checkpoint;
mod head;
mod params;
mod roi;
mod rpn;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prn::FusionMode;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use boxes::{box_decode, box_encode, nms, BBox};
pub use head::{
    detection_losses, mask_features, mask_head, mask_targets, predictor_head, remodel_mask_features, roi_labels, DetectionLosses,
    HeadOutput, RoiTarget,
};
pub use params::{Bound, Params};
pub use roi::{match_rois, roi_features, sample_rois, RoiLabel, SampledRois};
pub use rpn::{
    decode_proposals, generate_anchors, rpn_forward, rpn_losses, rpn_propose, rpn_targets, Proposal, RpnOutput,
    RpnTargets,
};

/// Architecture and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Backbone output channels `C`, also the attentive-vector length.
    pub channels: usize,
    pub stem_channels: usize,
    pub mid_channels: usize,
    pub anchor_sizes: Vec<f64>,
    pub rpn_pre_nms_top: usize,
    pub rpn_post_nms_top: usize,
    pub rpn_test_post_nms_top: usize,
    pub rpn_nms_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// RoIAlign output side before the 2×2 average pool.
    pub roi_pool: usize,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub head_hidden: usize,
    /// Mask branch on (λ = 1) or off (λ = 0).
    pub mask: bool,
    pub mask_size: usize,
    pub mask_channels: usize,
    pub fusion: FusionMode,
    pub meta_input_size: usize,
    /// PRN reuses the detector trunk parameters.
    pub share_trunk: bool,
    /// Divisors applied to head regression targets.
    pub box_std: [f64; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: 64,
            stem_channels: 16,
            mid_channels: 32,
            anchor_sizes: vec![16.0, 32.0, 64.0],
            rpn_pre_nms_top: 256,
            rpn_post_nms_top: 64,
            rpn_test_post_nms_top: 32,
            rpn_nms_iou: 0.7,
            rpn_batch: 64,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_pool: 6,
            rois_per_image: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            head_hidden: 64,
            mask: false,
            mask_size: 14,
            mask_channels: 16,
            fusion: FusionMode::Channelwise,
            meta_input_size: 64,
            share_trunk: true,
            box_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl DetectorConfig {
    pub const STRIDE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.stem_channels == 0 || self.mid_channels == 0 || self.head_hidden == 0 {
            return bad("channel counts must be positive");
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| *s <= 0.0) {
            return bad("anchor_sizes must be a nonempty list of positive sizes");
        }
        if self.roi_pool < 2 || self.roi_pool % 2 != 0 {
            return bad("roi_pool must be an even number ≥ 2");
        }
        if self.rois_per_image == 0 || self.rpn_post_nms_top == 0 || self.rpn_test_post_nms_top == 0 {
            return bad("RoI and proposal counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.fg_iou) {
            return bad("fg_fraction and fg_iou must lie in [0, 1]");
        }
        if self.mask_size == 0 || self.meta_input_size < Self::STRIDE {
            return bad("mask_size must be positive and meta_input_size at least the stride");
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Channel count the head sees after fusion.
    pub fn head_input(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => 2 * self.channels,
            _ => self.channels,
        }
    }
}

/// Classification layer layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Two logits (background, foreground) for whichever class the
    /// features were attended with.
    Binary,
    /// `N + 1` logits with background at index 0, for unattended features.
    Softmax,
}

/// Everything that fixes the parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub detector: DetectorConfig,
    pub num_classes: usize,
    pub head: HeadKind,
    /// PRN stem and meta-loss classifier present.
    pub prn: bool,
}

impl ModelSpec {
    pub fn cls_outputs(&self) -> usize {
        match self.head {
            HeadKind::Binary => 2,
            HeadKind::Softmax => self.num_classes + 1,
        }
    }

    /// Head input channels: the fused width when features are attended.
    pub fn head_input(&self) -> usize {
        match self.head {
            HeadKind::Binary => self.detector.head_input(),
            HeadKind::Softmax => self.detector.channels,
        }
    }

    /// Trunk parameter prefix used by the PRN.
    pub fn prn_trunk(&self) -> &'static str {
        if self.detector.share_trunk {
            "trunk"
        } else {
            "prn.trunk"
        }
    }
}

fn conv_param<F: Scalar>(p: &mut Params<F>, name: &str, cout: usize, cin: usize, k: usize, seed: u64) {
    p.init_weight(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, seed);
    p.init_zeros(&format!("{name}.b"), &[cout]);
}

fn linear_param<F: Scalar>(p: &mut Params<F>, name: &str, out: usize, inp: usize, seed: u64) {
    p.init_weight(&format!("{name}.w"), &[out, inp], inp, seed);
    p.init_zeros(&format!("{name}.b"), &[out]);
}

fn trunk_params<F: Scalar>(p: &mut Params<F>, prefix: &str, cfg: &DetectorConfig, seed: u64) {
    conv_param(p, &format!("{prefix}.1"), cfg.mid_channels, cfg.stem_channels, 3, seed);
    conv_param(p, &format!("{prefix}.2"), cfg.channels, cfg.mid_channels, 3, seed);
    conv_param(p, &format!("{prefix}.3"), cfg.channels, cfg.channels, 3, seed);
}

/// Fresh parameters: fan-in uniform weights, zero biases.
pub fn init_params<F: Scalar>(spec: &ModelSpec, seed: u64) -> Params<F> {
    let cfg = &spec.detector;
    let c = cfg.channels;
    let a = cfg.num_anchors();
    let mut p = Params::new();
    conv_param(&mut p, "backbone.stem", cfg.stem_channels, 3, 3, seed);
    trunk_params(&mut p, "trunk", cfg, seed);
    conv_param(&mut p, "rpn.conv", c, c, 3, seed);
    conv_param(&mut p, "rpn.obj", a, c, 1, seed);
    conv_param(&mut p, "rpn.delta", 4 * a, c, 1, seed);
    let pooled = cfg.roi_pool / 2;
    linear_param(&mut p, "roi.fc", c, c * pooled * pooled, seed);
    linear_param(&mut p, "head.fc", cfg.head_hidden, spec.head_input(), seed);
    linear_param(&mut p, "head.cls", spec.cls_outputs(), cfg.head_hidden, seed);
    linear_param(&mut p, "head.box", 4, cfg.head_hidden, seed);
    if cfg.mask {
        conv_param(&mut p, "mask.conv", cfg.mask_channels, spec.head_input(), 3, seed);
        conv_param(&mut p, "mask.out", 1, cfg.mask_channels, 1, seed);
    }
    if spec.prn {
        conv_param(&mut p, "prn.stem", cfg.stem_channels, 4, 3, seed);
        if !cfg.share_trunk {
            trunk_params(&mut p, "prn.trunk", cfg, seed);
        }
        linear_param(&mut p, "prn.meta_cls", spec.num_classes, c, seed);
    }
    p
}

/// Backbone output: `1×C×H'×W'` with `H' = ceil(H / stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn conv<F: Scalar>(g: &mut Graph<F>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn linear<F: Scalar>(g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.linear_cols(w, x, Some(b))
}

/// Layers 2..4 of the backbone; the last layer has no ReLU so pooled
/// features can take either sign.
pub fn trunk_forward<F: Scalar>(g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let x = conv(g, p, &format!("{prefix}.1"), x, 2, 1)?;
    let x = g.relu(x);
    let x = conv(g, p, &format!("{prefix}.2"), x, 2, 1)?;
    let x = g.relu(x);
    conv(g, p, &format!("{prefix}.3"), x, 1, 1)
}

/// Shifts the first three channels of an `N×C×H×W` batch from `[0, 1]` to
/// `[-0.5, 0.5]`; other channels pass unchanged.
pub(crate) fn center_rgb<F: Scalar>(g: &mut Graph<F>, x: Var, channels: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let plane = s[2] * s[3];
    let mut shift = Tensor::<F>::zeros(&s);
    for (i, v) in shift.data_mut().iter_mut().enumerate() {
        if (i / plane) % channels < 3 {
            *v = F::c(-0.5);
        }
    }
    let shift = g.constant(shift);
    g.add(x, shift)
}

/// `image` is `1×3×H×W` with values in `[0, 1]`.
pub fn backbone_forward<F: Scalar>(g: &mut Graph<F>, p: &Bound, image: Var) -> Result<FeatureMap> {
    if !g.value(image).all_finite() {
        return Err(Error::Numerical("backbone input contains non-finite values".into()));
    }
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Dimension(format!("backbone expects N×3×H×W, got {s:?}")));
    }
    let x = center_rgb(g, image, 3)?;
    let x = conv(g, p, "backbone.stem", x, 2, 1)?;
    let x = g.relu(x);
    let var = trunk_forward(g, p, "trunk", x)?;
    let out = g.shape(var).to_vec();
    Ok(FeatureMap {
        var,
        stride: DetectorConfig::STRIDE,
        height: out[2],
        width: out[3],
    })
}

/// A parameter set together with the spec that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params<f32>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.detector.validate()?;
        if spec.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let params = init_params(&spec, seed);
        Ok(Model { spec, params })
    }
}
