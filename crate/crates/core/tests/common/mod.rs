#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinformer::{ModelConfig, Tensor};

/// Smallest configuration exercising every block kind: C=8, 2x2 windows,
/// 4x4 output grid.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        window: 2,
        lab_depths: [2, 0, 0],
        gab_depth: 1,
        cab_depth: 1,
        heads: [2, 2, 2],
        mlp_ratio: 2,
        fusion_mlp_ratio: 1,
        head_hidden: Some(8),
        template_size: 32,
        search_size: 64,
        ..ModelConfig::default()
    }
}

pub fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![side, side, 3], data).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
