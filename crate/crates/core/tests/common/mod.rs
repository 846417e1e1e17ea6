#![allow(dead_code)]

use capa_core::model::{init_weights, synthetic_streams, ModelConfig, ModelWeights, TokenStream};

pub fn toy(seed: u64) -> ModelWeights {
    init_weights(&ModelConfig {
        seed,
        ..ModelConfig::toy()
    })
    .unwrap()
}

pub fn prompt(seed: u64, n_img: usize, n_txt: usize) -> TokenStream {
    synthetic_streams(1, seed, n_img, n_txt, 256)
        .unwrap()
        .remove(0)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
