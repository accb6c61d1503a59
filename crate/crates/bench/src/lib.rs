//! Fixtures shared by the criterion benches.

use blockprune::data::{sample_calibration, CalibrationSet, Corpus};
use blockprune::{Model, ModelConfig, Tensor};

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn toy_model(n_blocks: usize) -> Model<f32> {
    Model::init(ModelConfig::toy(n_blocks, 128, 4, 384), 0).expect("valid toy config")
}

/// Repetitive ASCII text, long enough for calibration sampling.
pub fn corpus() -> Corpus {
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(400);
    Corpus::from_bytes("bench", text.as_bytes(), 0.05).expect("nonempty corpus")
}

pub fn calibration(samples: usize, seq_len: usize) -> CalibrationSet {
    sample_calibration(&corpus(), samples, seq_len, 0).expect("corpus is long enough")
}
