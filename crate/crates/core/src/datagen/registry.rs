use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClassSplit, DatasetManifest};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Training phase: 1 is base-only meta-training, 2 adds novel classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Phase {
    One,
    Two,
}

impl TryFrom<u8> for Phase {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Phase::One),
            2 => Ok(Phase::Two),
            _ => Err(format!("phase must be 1 or 2, got {v}")),
        }
    }
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        match p {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Reference to one annotation: the image and its index in that image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShotRef {
    pub image_id: String,
    pub annotation_index: usize,
}

/// The exact objects each class may draw meta inputs and labels from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRegistry {
    pub shots_per_class: BTreeMap<usize, Vec<ShotRef>>,
    pub k: usize,
    pub phase: Phase,
    pub rng_seed: u64,
    /// Novel shots may sit in images that also hold base objects.
    pub mixed_images_allowed: bool,
}

impl FewShotRegistry {
    pub fn classes(&self) -> Vec<usize> {
        self.shots_per_class.keys().copied().collect()
    }

    pub fn shots(&self, class_id: usize) -> Result<&[ShotRef]> {
        self.shots_per_class
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Registry(format!("class {class_id} has no entries in the phase {} registry", u8::from(self.phase))))
    }

    /// Images referenced by any entry, sorted and deduplicated.
    pub fn image_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .shots_per_class
            .values()
            .flatten()
            .map(|s| s.image_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn contains(&self, r: &ShotRef) -> bool {
        self.shots_per_class.values().any(|v| v.contains(r))
    }

    /// Every entry points at an existing annotation of the recorded class.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let index: BTreeMap<&str, usize> = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        for (&c, refs) in &self.shots_per_class {
            for r in refs {
                let img = index
                    .get(r.image_id.as_str())
                    .map(|&i| &manifest.images[i])
                    .ok_or_else(|| Error::Registry(format!("entry references unknown image {:?}", r.image_id)))?;
                match img.objects.get(r.annotation_index) {
                    Some(o) if o.class_id == c => {}
                    _ => {
                        return Err(Error::Registry(format!(
                            "entry {}#{} is not an annotation of class {c}",
                            r.image_id, r.annotation_index
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Phase 1 keeps every base-class annotation. Phase 2 draws `k` per novel
/// class and `3k` per base class without replacement (all when fewer exist).
pub fn sample_kshot(
    manifest: &DatasetManifest,
    split: &ClassSplit,
    k: usize,
    phase: Phase,
    rng_seed: u64,
) -> Result<FewShotRegistry> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<ShotRef>> = BTreeMap::new();
    for img in &manifest.images {
        for (j, o) in img.objects.iter().enumerate() {
            by_class.entry(o.class_id).or_default().push(ShotRef {
                image_id: img.id.clone(),
                annotation_index: j,
            });
        }
    }
    let name = |c: usize| split.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut shots_per_class = BTreeMap::new();
    match phase {
        Phase::One => {
            for &c in &split.base_classes {
                if let Some(v) = by_class.remove(&c) {
                    shots_per_class.insert(c, v);
                }
            }
            if shots_per_class.is_empty() {
                return Err(Error::Data("no base-class annotations in the manifest".into()));
            }
        }
        Phase::Two => {
            for c in split.all_classes() {
                let mut pool = by_class
                    .remove(&c)
                    .ok_or_else(|| Error::Data(format!("class {c} ({}) has no annotations in the manifest", name(c))))?;
                let take = if split.is_novel(c) { k } else { 3 * k };
                pool.shuffle(&mut rng_for(rng_seed, &[0x5807, c as u64, k as u64]));
                pool.truncate(take);
                pool.sort();
                shots_per_class.insert(c, pool);
            }
        }
    }
    Ok(FewShotRegistry {
        shots_per_class,
        k,
        phase,
        rng_seed,
        mixed_images_allowed: true,
    })
}
