//! Fixtures shared by the criterion benchmarks.

use gpq_core::detector::{generate_dataset, Detector, ModelConfig, SceneConfig};
use gpq_core::matching::CostMatrix;
use gpq_core::{Result, Tensor};

/// Decoder shape used for the latency sweep: E=64, N=4, 64 feature tokens.
pub fn latency_model(num_queries: usize, seed: u64) -> Result<Detector> {
    Detector::new(
        ModelConfig {
            num_queries,
            grid: 8,
            embed_dim: 64,
            heads: 8,
            ffn_dim: 128,
            layers: 4,
            num_classes: 4,
            frequencies: 16,
        },
        seed,
    )
}

/// Encoded features for one synthetic scene.
pub fn features(model: &Detector, seed: u64) -> Result<Tensor> {
    let scenes = generate_dataset(seed, 1, &SceneConfig::default())?;
    model.encoder.encode(&scenes[0])
}

/// A dense cost matrix with a cheap deterministic fill.
pub fn cost_matrix(queries: usize, targets: usize, seed: u64) -> Result<CostMatrix> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let values = (0..queries * targets)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    CostMatrix::new(queries, targets, values)
}
