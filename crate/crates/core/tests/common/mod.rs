#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use metarcnn::cli::{BenchData, DataConfig};
use metarcnn::datagen::NovelSelector;
use metarcnn::meta_train::TrainConfig;

/// A few dozen 64×64 images over 6 classes (4 base, 2 novel).
pub fn small_data_config() -> DataConfig {
    DataConfig {
        num_classes: 6,
        train_images: 60,
        test_images: 12,
        canvas: [64, 64],
        novel: NovelSelector::Ids(vec![1, 4]),
        ks: vec![1, 2],
        ..DataConfig::default()
    }
}

pub fn small_bench(seed: u64) -> BenchData {
    BenchData::generate(&small_data_config(), seed).unwrap()
}

/// A short schedule on a narrow network.
pub fn small_train_config() -> TrainConfig {
    let mut c = TrainConfig {
        phase1_iters: 12,
        phase2_iters: 6,
        k: 2,
        phase1_shots: 1,
        ft_full_window: 3,
        ft_full_max_iters: 12,
        ..TrainConfig::default()
    };
    c.detector.channels = 16;
    c.detector.mid_channels = 12;
    c.detector.stem_channels = 8;
    c.detector.head_hidden = 16;
    c.detector.meta_input_size = 32;
    c
}
