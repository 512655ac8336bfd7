use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::MetaScope;
use crate::datagen::{ClassSplit, Dataset, FewShotRegistry, ImageSample, Phase, ShotRef};
use crate::error::{Error, Result};
use crate::prn::{build_meta_input, MetaInput};

/// Dataset plus an id index, shared by episode construction and evaluation.
pub struct DataView<'a> {
    pub dataset: &'a Dataset,
    index: HashMap<&'a str, usize>,
}

impl<'a> DataView<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        DataView {
            dataset,
            index: dataset.index(),
        }
    }

    pub fn sample(&self, image_id: &str) -> Result<&'a ImageSample> {
        self.index
            .get(image_id)
            .map(|&i| &self.dataset.samples[i])
            .ok_or_else(|| Error::Registry(format!("registry references unknown image {image_id:?}")))
    }

    pub fn meta_input(&self, r: &ShotRef, size: usize, use_mask: bool) -> Result<MetaInput> {
        build_meta_input(self.sample(&r.image_id)?, r.annotation_index, size, use_mask)
    }
}

/// One training image with its targets and meta set.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub sample: &'a ImageSample,
    pub phase: Phase,
    /// Annotation indices that act as ground truth.
    pub targets: Vec<usize>,
    /// Annotation indices that are neither foreground nor background.
    pub ignored: Vec<usize>,
    pub c_meta: Vec<usize>,
    /// `K` inputs per class of `c_meta`, grouped by class in `c_meta` order.
    pub meta_inputs: Vec<MetaInput>,
}

/// Which annotations of `sample` are targets in `phase`. Phase 1 keeps base
/// classes; phase 2 keeps the objects listed in the registry.
pub fn episode_targets(sample: &ImageSample, registry: &FewShotRegistry, split: &ClassSplit) -> (Vec<usize>, Vec<usize>) {
    let keep = |j: usize| match registry.phase {
        Phase::One => split.is_base(sample.annotations[j].class_id),
        Phase::Two => registry.contains(&ShotRef {
            image_id: sample.id.clone(),
            annotation_index: j,
        }),
    };
    (0..sample.annotations.len()).partition(|&j| keep(j))
}

/// `K` shots of `class`, without replacement when the registry holds at
/// least `K`, cycling through a shuffled list otherwise.
pub fn draw_shots(registry: &FewShotRegistry, class: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ShotRef>> {
    let pool = registry.shots(class)?;
    if pool.is_empty() {
        return Err(Error::Registry(format!("class {class} has an empty registry entry")));
    }
    if pool.len() >= k {
        Ok(pool.choose_multiple(rng, k).cloned().collect())
    } else {
        let mut order: Vec<&ShotRef> = pool.iter().collect();
        order.shuffle(rng);
        let start = rng.gen_range(0..order.len());
        Ok((0..k).map(|i| order[(start + i) % order.len()].clone()).collect())
    }
}

/// Builds the episode for `sample`. `k = 0` skips the meta set (plain
/// detector strategies).
#[allow(clippy::too_many_arguments)]
pub fn build_episode<'a>(
    data: &DataView<'a>,
    sample: &'a ImageSample,
    registry: &FewShotRegistry,
    split: &ClassSplit,
    k: usize,
    scope: MetaScope,
    meta_size: usize,
    use_mask: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Episode<'a>> {
    let (targets, ignored) = episode_targets(sample, registry, split);
    let c_meta: Vec<usize> = match scope {
        MetaScope::ImageClasses => targets
            .iter()
            .map(|&j| sample.annotations[j].class_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        MetaScope::AllClasses => registry.classes(),
    };
    if let Some(&c) = c_meta.iter().find(|c| !registry.shots_per_class.contains_key(c)) {
        return Err(Error::Registry(format!("class {c} of image {} is not in the registry", sample.id)));
    }
    let mut meta_inputs = Vec::with_capacity(k * c_meta.len());
    if k > 0 {
        for &c in &c_meta {
            for r in draw_shots(registry, c, k, rng)? {
                meta_inputs.push(data.meta_input(&r, meta_size, use_mask)?);
            }
        }
    }
    Ok(Episode {
        sample,
        phase: registry.phase,
        targets,
        ignored,
        c_meta,
        meta_inputs,
    })
}
