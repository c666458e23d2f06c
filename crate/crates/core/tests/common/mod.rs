#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tshsr::{Model, ModelConfig, StreamMode, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        raw_dim: 5,
        embed_dim: 4,
        dim: 4,
        sim_dim: 3,
        vocab_size: 20,
        max_len: 6,
        layers: 2,
        ..ModelConfig::default()
    }
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn rand_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Replaces every parameter (biases included) with uniform noise in
/// `(-scale, scale)` so no path is silently zero.
pub fn randomize(model: &mut Model, rng: &mut impl Rng, scale: f64) {
    for (_, t) in model.params.iter_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
}

/// A random small configuration covering every switch.
pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let stream = match rng.gen_range(0..4) {
        0 => StreamMode::I2tOnly,
        1 => StreamMode::T2iOnly,
        _ => StreamMode::Both,
    };
    ModelConfig {
        raw_dim: rng.gen_range(2..7),
        embed_dim: rng.gen_range(2..6),
        dim: rng.gen_range(2..6),
        sim_dim: rng.gen_range(2..5),
        vocab_size: rng.gen_range(3..15),
        max_len: 6,
        lambda: rng.gen_range(1.0..12.0),
        layers: rng.gen_range(0..4),
        hierarchical: rng.gen_bool(0.7),
        row_softmax: rng.gen_bool(0.2),
        stream,
        share_sim_weights: rng.gen_bool(0.3),
        seed: rng.gen(),
    }
}

pub fn raw_rows(t: &Tensor) -> oracle::Mat {
    oracle::mat(t)
}
