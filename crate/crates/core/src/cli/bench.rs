use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::DataConfig;
use crate::datagen::{
    generate_dataset, ingest_annotations, load_samples, make_split, sample_kshot, write_dataset, AnnotationFormat,
    ClassSplit, Dataset, DatasetManifest, FewShotRegistry, Phase, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::rng::derive;

/// Train and test sets, split, and the registries of one shot seed.
#[derive(Debug, Clone)]
pub struct BenchData {
    pub train: Dataset,
    pub test: Dataset,
    pub split: ClassSplit,
    pub phase1: FewShotRegistry,
    /// Phase-2 registry per K.
    pub phase2: BTreeMap<usize, FewShotRegistry>,
}

/// Counts printed and stored by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub train_images: usize,
    pub test_images: usize,
    pub train_objects: usize,
    pub test_objects: usize,
    pub class_names: Vec<String>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// Training objects per class id.
    pub class_histogram: Vec<usize>,
    pub train_manifest_hash: String,
    pub test_manifest_hash: String,
}

pub fn registry_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("registry_k{k}.json"))
}

impl BenchData {
    pub fn generate(cfg: &DataConfig, shot_seed: u64) -> Result<Self> {
        let canvas = (cfg.canvas[0], cfg.canvas[1]);
        let train = generate_dataset(cfg.train_images, cfg.num_classes, canvas, cfg.seed, &cfg.scene, "train")?;
        let test_seed = derive(cfg.seed, &[0x7E57]);
        let test = generate_dataset(cfg.test_images, cfg.num_classes, canvas, test_seed, &cfg.scene, "test")?;
        let split = make_split(&train.class_names, &cfg.novel, cfg.split_id)?;
        Self::with_registries(train, test, split, &cfg.ks, shot_seed)
    }

    /// Samples the phase-1 registry and one phase-2 registry per K.
    pub fn with_registries(train: Dataset, test: Dataset, split: ClassSplit, ks: &[usize], shot_seed: u64) -> Result<Self> {
        let manifest = train.manifest();
        let phase1 = sample_kshot(&manifest, &split, 1, Phase::One, shot_seed)?;
        let phase2 = ks
            .iter()
            .map(|&k| Ok((k, sample_kshot(&manifest, &split, k, Phase::Two, shot_seed)?)))
            .collect::<Result<_>>()?;
        Ok(BenchData {
            train,
            test,
            split,
            phase1,
            phase2,
        })
    }

    pub fn registry(&self, k: usize) -> Result<&FewShotRegistry> {
        self.phase2
            .get(&k)
            .ok_or_else(|| Error::Config(format!("no K={k} registry; available: {:?}", self.phase2.keys().collect::<Vec<_>>())))
    }

    pub fn summary(&self) -> Result<GenSummary> {
        let (tm, vm) = (self.train.manifest(), self.test.manifest());
        Ok(GenSummary {
            train_images: tm.images.len(),
            test_images: vm.images.len(),
            train_objects: tm.num_objects(),
            test_objects: vm.num_objects(),
            class_names: self.split.class_names.clone(),
            base_classes: self.split.base_classes.iter().copied().collect(),
            novel_classes: self.split.novel_classes.iter().copied().collect(),
            class_histogram: tm.class_histogram(),
            train_manifest_hash: tm.content_hash()?,
            test_manifest_hash: vm.content_hash()?,
        })
    }

    /// Writes both image sets, the split, and the registries under `dir`.
    pub fn write(&self, dir: &Path, provenance: &serde_json::Value) -> Result<GenSummary> {
        write_dataset(&self.train, &dir.join("train"))?;
        write_dataset(&self.test, &dir.join("test"))?;
        write_json(&dir.join("split.json"), &self.split, provenance)?;
        write_json(&dir.join("registry_phase1.json"), &self.phase1, provenance)?;
        for (&k, r) in &self.phase2 {
            write_json(&registry_path(dir, k), r, provenance)?;
        }
        let summary = self.summary()?;
        write_json(&dir.join("gen_summary.json"), &summary, provenance)?;
        Ok(summary)
    }

    /// Reads what [`BenchData::write`] produced.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join("train").join(MANIFEST_FILE).exists() {
            return Err(Error::Data(format!("no dataset under {} (run `gen` first)", dir.display())));
        }
        let train = load_dataset(&dir.join("train"))?;
        let test = load_dataset(&dir.join("test"))?;
        let split: ClassSplit = read_json(&dir.join("split.json"))?;
        let phase1 = FewShotRegistry::load(&dir.join("registry_phase1.json"))?;
        let manifest = train.manifest();
        phase1.validate(&manifest)?;
        let mut phase2 = BTreeMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(k) = name.strip_prefix("registry_k").and_then(|s| s.strip_suffix(".json")) {
                if k.parse::<usize>().is_ok() {
                    let r = FewShotRegistry::load(&p)?;
                    r.validate(&manifest)?;
                    phase2.insert(r.k, r);
                }
            }
        }
        Ok(BenchData {
            train,
            test,
            split,
            phase1,
            phase2,
        })
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let samples = load_samples(&manifest, dir)?;
    Ok(Dataset {
        class_names: manifest.class_names,
        samples,
        rng_seed: manifest.rng_seed,
    })
}

/// Reads a dataset directory written by `gen`; any rejected record is an error.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let outcome = ingest_annotations(dir, AnnotationFormat::NativeJsonl, None)?;
    if let Some(d) = outcome.diagnostics.first() {
        return Err(Error::Data(d.to_string()));
    }
    Ok(outcome.manifest)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Pretty JSON of `value` with a `provenance` key added to the top-level object.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T, provenance: &serde_json::Value) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("provenance".into(), provenance.clone());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&v)?).map_err(|e| Error::io(path, e))
}
