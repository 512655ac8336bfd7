//! Few-shot object detection and segmentation with a two-stage detector
//! whose predictor heads are remodeled by class-attentive vectors.
//!
//! The pipeline is organized as:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, and gradient checking.
//! * [`datagen`]: synthetic scenes, class splits, few-shot registries, and
//!   annotation I/O.
//! * [`detector`]: backbone, RPN, RoIAlign, predictor heads, losses, and
//!   checkpoints.
//! * [`prn`]: the predictor-head remodeling network that turns few-shot
//!   reference objects into attentive vectors.
//! * [`meta_train`]: episodic training and the baseline strategies.
//! * [`eval`]: inference with precomputed class banks and AP reporting.
//! * [`cli`]: experiment orchestration.

pub mod cli;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod eval;
pub mod meta_train;
pub mod prn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
