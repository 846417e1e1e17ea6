//! Fixtures for the kernel benchmarks.

use capa_core::model::{init_weights, synthetic_streams, ModelConfig, ModelWeights, TokenStream};
use capa_core::tensor::Tensor2D;

/// Toy model with the default shape.
pub fn toy_model(seed: u64) -> ModelWeights {
    init_weights(&ModelConfig {
        seed,
        ..ModelConfig::toy()
    })
    .expect("toy config is valid")
}

pub fn prompt(seed: u64, n_img: usize, n_txt: usize) -> TokenStream {
    synthetic_streams(1, seed, n_img, n_txt, ModelConfig::toy().vocab_size)
        .expect("non-empty prompt")
        .remove(0)
}

pub fn calib_set(n: usize, seed: u64) -> Vec<TokenStream> {
    synthetic_streams(n, seed, 48, 16, ModelConfig::toy().vocab_size).expect("non-empty set")
}

/// Deterministic dense matrix with entries in [-1, 1).
pub fn filled(rows: usize, cols: usize, salt: u32) -> Tensor2D {
    let data = (0..rows * cols)
        .map(|i| {
            let h = (i as u32 ^ salt).wrapping_mul(2_654_435_761);
            (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
        })
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape matches")
}
