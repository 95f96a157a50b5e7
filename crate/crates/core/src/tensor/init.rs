//! Deterministic weight initialization helpers.

use rand::rngs::StdRng;
use rand::Rng;

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut StdRng, std: f64) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (z * std) as f32
}

pub fn normal_vec(rng: &mut StdRng, len: usize, std: f64) -> Vec<f32> {
    (0..len).map(|_| normal(rng, std)).collect()
}

/// Glorot/Xavier uniform for a fan-in/fan-out pair.
pub fn glorot_vec(rng: &mut StdRng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect()
}
