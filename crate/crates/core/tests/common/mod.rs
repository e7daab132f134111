#![allow(dead_code)]

use nnwm_core::*;

pub const TINY: FeatureShape = FeatureShape::Image {
    height: 4,
    width: 4,
    channels: 2,
};

pub struct Tiny {
    pub train: Dataset,
    pub test: Dataset,
    pub model: HostModel,
    pub layer: usize,
}

/// Four-class blobs on 4x4x2 images and a fresh small-cnn.
pub fn tiny(seed: u64) -> Tiny {
    let task = SyntheticTask::new(4, TINY, 5.0, 1000 + seed).unwrap();
    let train = task.sample(256, 2 * seed, Split::Train).unwrap();
    let test = task.sample(256, 2 * seed + 1, Split::Test).unwrap();
    let model = build_host(HostPreset::SmallCnn, TINY, 4, seed).unwrap();
    let layer = model.embed_layer().unwrap();
    Tiny {
        train,
        test,
        model,
        layer,
    }
}

pub fn config(epochs: usize, situation: Situation, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(epochs, situation, seed);
    c.batch_size = 8;
    c
}

pub fn watermark(layer: usize, kind: KeyKind, seed: u64, bits: usize) -> Watermark {
    Watermark::new(
        layer,
        make_key(kind, seed, bits, 144).unwrap(),
        Message::random(bits, seed ^ 0x5a).unwrap(),
    )
}
