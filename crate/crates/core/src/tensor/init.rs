//! Parameter initialization schemes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{numel, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Zeros,
    Ones,
    XavierUniform,
    Normal(f64),
}

/// Builds a trainable tensor. Deterministic given the rng state. For
/// `XavierUniform`, rank >= 2 tensors use the trailing two dimensions as
/// (fan_in, fan_out); rank-1 tensors use (1, len).
pub fn init_param(shape: impl Into<Vec<usize>>, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = shape.into();
    let n = numel(&shape);
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Ones => vec![1.0; n],
        InitScheme::XavierUniform => {
            let (fan_in, fan_out) = match shape.len() {
                0 => (1, 1),
                1 => (1, shape[0]),
                r => (shape[r - 2], shape[r - 1]),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
        InitScheme::Normal(sigma) => (0..n).map(|_| sample_normal(rng) * sigma).collect(),
    };
    Ok(Tensor::from_vec(shape, data)?.with_grad())
}

// Box-Muller; two uniforms per draw keeps the stream layout simple.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
