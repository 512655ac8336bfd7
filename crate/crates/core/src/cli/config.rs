use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_split, synthetic_class_names, NovelSelector, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::InferenceOptions;
use crate::meta_train::TrainConfig;

/// Source hash of the crate, fixed at build time.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("METARCNN_SOURCE_HASH"));

/// Synthetic benchmark layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Where `gen` writes and the other commands read.
    pub dir: PathBuf,
    pub num_classes: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// `[width, height]`.
    pub canvas: [usize; 2],
    /// Seed of the images; the run seed only drives shot sampling and training.
    pub seed: u64,
    pub novel: NovelSelector,
    pub split_id: u32,
    /// Shot counts with a phase-2 registry on disk.
    pub ks: Vec<usize>,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            num_classes: 12,
            train_images: 2000,
            test_images: 500,
            canvas: [128, 128],
            seed: 1,
            // one (shape, texture) pair per shape, so every novel class
            // recombines parts seen in base classes
            novel: NovelSelector::Ids(vec![2, 4, 6, 10]),
            split_id: 1,
            ks: vec![1, 3, 10],
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub inference: InferenceOptions,
    /// Test images timed by `--timing`.
    pub timing_images: usize,
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            inference: InferenceOptions::default(),
            timing_images: 50,
            timing_repeats: 3,
        }
    }
}

/// Everything a command reads; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of training and evaluation outputs.
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; no command does any work before this passes.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, or the file at `path`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes == 0 {
            return Err(Error::Config("data.num_classes must be positive".into()));
        }
        if d.train_images == 0 || d.test_images == 0 {
            return Err(Error::Config("data.train_images and data.test_images must be positive".into()));
        }
        if d.canvas.iter().any(|&s| s < 16) {
            return Err(Error::Config(format!("data.canvas {:?} is smaller than 16 pixels", d.canvas)));
        }
        if d.ks.is_empty() || d.ks.contains(&0) {
            return Err(Error::Config("data.ks must list positive shot counts".into()));
        }
        let split = make_split(&synthetic_class_names(d.num_classes), &d.novel, d.split_id)?;
        if split.base_classes.is_empty() || split.novel_classes.is_empty() {
            return Err(Error::Config("the split needs at least one base and one novel class".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.inference.score_threshold) || self.eval.timing_repeats == 0 {
            return Err(Error::Config("eval settings out of range".into()));
        }
        self.train.validate()
    }

    /// The training settings of this run, with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// JSON Schema of the config file, as published under `docs/`.
    pub fn schema() -> serde_json::Value {
        schemars::schema_for!(RunConfig).to_value()
    }

    /// Snapshot embedded in every output file.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self,
            "code_version": CODE_VERSION,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        let e = RunConfig::from_json(r#"{"sed": 1}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_json(r#"{"data": {"num_classes": 0}}"#).unwrap_err();
        assert!(e.to_string().contains("num_classes"), "{e}");
    }
}
