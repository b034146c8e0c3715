//! Shared fixtures for the criterion benches: deterministic pseudo-random
//! states and decoder weights, a small looped model, and a spiral map that
//! never settles (so exit loops run to their budget and stay comparable
//! across policies).

use loopscope_core::model::{Model, ModelConfig};
use loopscope_core::model::{Group, LoopSchedule, RecurrenceSpec};
use loopscope_core::spiral::SpiralConfig;
use loopscope_core::vecmath::{dot, softmax};

/// Deterministic fill without pulling an RNG dependency into the fixtures.
fn lcg_stream(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

pub fn state(dim: usize, seed: u64) -> Vec<f64> {
    lcg_stream(seed, dim)
}

/// Row-major vocab x dim readout weights.
pub fn decoder_weights(vocab: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..vocab)
        .map(|r| lcg_stream(0xdec0de + r as u64, dim))
        .collect()
}

/// State -> probability distribution through a linear readout; the cost a
/// KL trigger pays on every loop step.
pub fn decode_softmax(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w.iter().map(|row| dot(row, x)).collect();
    softmax(&logits)
}

/// Near-pure rotation: step norms shrink by 0.1% per step, so thresholds
/// around 1e-6 are not reached within a 128-step budget.
pub fn slow_spiral(dim: usize) -> SpiralConfig {
    SpiralConfig::axis_aligned(dim, 0.999, 30f64.to_radians(), 1.0).expect("valid spiral")
}

/// Two stacked layers, each its own self-loop group: the smallest shape
/// that exercises the looped path end to end.
pub fn tiny_model() -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        vocab_size: 256,
        block_size: 64,
        seed: 1,
    };
    let rec = RecurrenceSpec {
        groups: vec![Group::self_loop(0), Group::self_loop(1)],
        schedule: LoopSchedule::Fixed { l: 4 },
        sigma_state: 0.02,
        noise_every_step: false,
    };
    Model::new(cfg, rec).expect("valid tiny model")
}
