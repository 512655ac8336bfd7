use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const VOC: [&str; 20] = [
    "aero", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "table", "dog", "horse", "mbike",
    "person", "plant", "sheep", "sofa", "train", "tv",
];

const VOC_SPLITS: [[&str; 5]; 3] = [
    ["bird", "bus", "cow", "mbike", "sofa"],
    ["aero", "bottle", "cow", "horse", "sofa"],
    ["boat", "cat", "mbike", "sheep", "sofa"],
];

const COCO: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
];

/// COCO names of the 20 VOC categories.
pub const COCO_VOC_OVERLAP: [&str; 20] = [
    "airplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "dining table", "dog",
    "horse", "motorcycle", "person", "potted plant", "sheep", "couch", "train", "tv",
];

pub fn voc_class_names() -> Vec<String> {
    VOC.iter().map(|s| s.to_string()).collect()
}

pub fn coco_class_names() -> Vec<String> {
    COCO.iter().map(|s| s.to_string()).collect()
}

/// Novel classes of the standard VOC splits, numbered from 1.
pub fn voc_novel_split(split_id: u32) -> Result<Vec<String>> {
    VOC_SPLITS
        .get((split_id as usize).wrapping_sub(1))
        .map(|s| s.iter().map(|n| n.to_string()).collect())
        .ok_or_else(|| Error::Config(format!("VOC split must be 1, 2 or 3, got {split_id}")))
}

/// How the novel classes are picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum NovelSelector {
    Names(Vec<String>),
    Ids(Vec<usize>),
    /// The last `n` classes of the universe.
    Last(usize),
    /// `count` classes chosen by a seeded shuffle.
    Seeded { count: usize, seed: u64 },
}

/// Disjoint, exhaustive base/novel partition of a class universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_classes: BTreeSet<usize>,
    pub novel_classes: BTreeSet<usize>,
    pub split_id: u32,
    pub class_names: Vec<String>,
}

impl ClassSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_classes.contains(&class_id)
    }

    pub fn is_base(&self, class_id: usize) -> bool {
        self.base_classes.contains(&class_id)
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.class_names.len()).collect()
    }
}

pub fn make_split(universe: &[String], selector: &NovelSelector, split_id: u32) -> Result<ClassSplit> {
    let n = universe.len();
    let novel: BTreeSet<usize> = match selector {
        NovelSelector::Names(names) => names
            .iter()
            .map(|name| {
                universe.iter().position(|u| u == name).ok_or_else(|| {
                    Error::Config(format!("novel class {name:?} is not in the class universe {universe:?}"))
                })
            })
            .collect::<Result<_>>()?,
        NovelSelector::Ids(ids) => {
            if let Some(bad) = ids.iter().find(|&&i| i >= n) {
                return Err(Error::Config(format!("novel class id {bad} outside universe of {n} classes")));
            }
            ids.iter().copied().collect()
        }
        NovelSelector::Last(k) => {
            if *k > n {
                return Err(Error::Config(format!("cannot take {k} novel classes from {n}")));
            }
            (n - k..n).collect()
        }
        NovelSelector::Seeded { count, seed } => {
            if *count > n {
                return Err(Error::Config(format!("cannot take {count} novel classes from {n}")));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng_for(*seed, &[0x5917]));
            ids.into_iter().take(*count).collect()
        }
    };
    let base = (0..n).filter(|c| !novel.contains(c)).collect();
    Ok(ClassSplit {
        base_classes: base,
        novel_classes: novel,
        split_id,
        class_names: universe.to_vec(),
    })
}
