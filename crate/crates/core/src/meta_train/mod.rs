//! Episodic training: mini-batch construction, the joint detection plus
//! meta objective, the two-phase schedule, and the baseline strategies.

mod episode;
mod optim;
mod schedule;
mod step;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use episode::{build_episode, draw_shots, episode_targets, DataView, Episode};
pub use optim::Sgd;
pub use schedule::{run_schedule, Event, LogEntry, TrainData, TrainState};
pub use step::{episode_objective, train_step, Attention, LossBreakdown, LossVars, ObjectiveOptions};

use crate::datagen::DatasetManifest;
use crate::detector::{DetectorConfig, HeadKind, ModelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Two-phase episodic training with PRN-attended heads.
    MetaRcnn,
    /// Plain detector on base and few-shot data together.
    FrcnJoint,
    /// Plain detector, base-only then a fixed-length fine-tune.
    FrcnFt,
    /// Plain detector, base-only then fine-tuned to a loss plateau.
    FrcnFtFull,
    /// As `MetaRcnn`, but vectors attend a pooled whole-image feature.
    FullImageMeta,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::MetaRcnn,
        Strategy::FrcnJoint,
        Strategy::FrcnFt,
        Strategy::FrcnFtFull,
        Strategy::FullImageMeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MetaRcnn => "meta_rcnn",
            Strategy::FrcnJoint => "frcn_joint",
            Strategy::FrcnFt => "frcn_ft",
            Strategy::FrcnFtFull => "frcn_ft_full",
            Strategy::FullImageMeta => "full_image_meta",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Strategy::ALL.iter().map(|x| x.name()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", known.join(", ")))
            })
    }

    /// Uses the PRN and binary class-attended heads.
    pub fn is_meta(self) -> bool {
        matches!(self, Strategy::MetaRcnn | Strategy::FullImageMeta)
    }

    pub fn head(self) -> HeadKind {
        if self.is_meta() {
            HeadKind::Binary
        } else {
            HeadKind::Softmax
        }
    }

    /// Strategies with identical phase-1 updates; a phase-1 state of one can
    /// continue as any other in the same family.
    pub fn phase1_family(self) -> u8 {
        match self {
            Strategy::MetaRcnn => 0,
            Strategy::FullImageMeta => 1,
            Strategy::FrcnFt | Strategy::FrcnFtFull => 2,
            Strategy::FrcnJoint => 3,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which classes get meta inputs in an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum MetaScope {
    /// Classes of the target objects in the training image.
    ImageClasses,
    /// Every class of the phase's registry.
    AllClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub lr: f32,
    /// Multiplier applied to `lr` from the first phase-2 iteration on.
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f32,
    /// Shots per class in phase 2.
    pub k: usize,
    /// Meta inputs per class in phase-1 episodes; independent of `k` so one
    /// phase-1 run serves every shot count.
    pub phase1_shots: usize,
    pub meta_loss: bool,
    pub meta_loss_weight: f64,
    pub scope: MetaScope,
    /// Feed the object mask as the fourth PRN input channel (zeros otherwise).
    pub meta_mask_channel: bool,
    pub seed: u64,
    /// Emit a checkpoint event every this many iterations; zero disables.
    pub checkpoint_every: usize,
    pub ft_full_window: usize,
    pub ft_full_min_improvement: f64,
    pub ft_full_max_iters: usize,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_iters: 2000,
            phase2_iters: 500,
            lr: 0.01,
            lr_decay: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            k: 3,
            phase1_shots: 1,
            meta_loss: true,
            meta_loss_weight: 1.0,
            scope: MetaScope::AllClasses,
            meta_mask_channel: true,
            seed: 0,
            checkpoint_every: 0,
            ft_full_window: 200,
            ft_full_min_improvement: 0.01,
            ft_full_max_iters: 2000,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 || self.phase1_shots == 0 {
            return bad("k and phase1_shots must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("momentum must lie in [0, 1); weight_decay and clip_norm must be non-negative");
        }
        if !(self.meta_loss_weight.is_finite() && self.meta_loss_weight >= 0.0) {
            return bad("meta_loss_weight must be non-negative");
        }
        if self.ft_full_window == 0 || self.ft_full_max_iters < 2 * self.ft_full_window {
            return bad("ft_full_max_iters must cover at least two ft_full_window spans");
        }
        Ok(())
    }

    /// Rejects settings the data cannot support.
    pub fn check_data(&self, manifest: &DatasetManifest) -> Result<()> {
        let missing = manifest.images.iter().flat_map(|i| &i.objects).any(|o| o.mask_rle.is_none());
        if self.detector.mask && missing {
            return Err(Error::Config("the mask branch is enabled but some objects carry no mask".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, strategy: Strategy, num_classes: usize) -> ModelSpec {
        ModelSpec {
            detector: self.detector.clone(),
            num_classes,
            head: strategy.head(),
            prn: strategy.is_meta(),
        }
    }

    pub fn objective(&self, strategy: Strategy) -> ObjectiveOptions {
        ObjectiveOptions {
            attention: Attention::Prn,
            full_image: strategy == Strategy::FullImageMeta,
            meta_loss_weight: if self.meta_loss { self.meta_loss_weight } else { 0.0 },
        }
    }
}
