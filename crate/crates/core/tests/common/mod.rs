#![allow(dead_code)]

use attnscope_core::model::{EncoderConfig, ModelWeights, TokenizedSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Central-difference Jacobian of `f` at `x`: `out[r][c] = ∂f_r/∂x_c`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let p = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; p];
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        xp[c] = x[c] + h;
        let up = f(&xp);
        xp[c] = x[c] - h;
        let down = f(&xp);
        xp[c] = x[c];
        for r in 0..p {
            jac[r][c] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    jac
}

/// `max |a − b| / max |b|`: error relative to the scale of the reference.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

pub fn flatten(j: &[Vec<f64>]) -> Vec<f64> {
    j.iter().flatten().copied().collect()
}

/// The toy encoder used by the gradient and attribution checks: 2 layers,
/// 2 heads, d_e = 8, d_q = d_v = 4, d_ff = 16.
pub fn toy_config() -> EncoderConfig {
    EncoderConfig::toy(2, 2, 8, 4, 16)
}

pub fn toy_weights(seed: u64, std: f64) -> ModelWeights<f64> {
    let mut r = rng(seed);
    ModelWeights::random_dense(&toy_config(), std, &mut r).unwrap()
}

pub fn toy_sequence(seed: u64, len: usize) -> TokenizedSequence {
    let ids = (0..len)
        .map(|i| (seed as usize * 7 + i * 5 + 1) % 32)
        .collect();
    TokenizedSequence::new(format!("seq{seed}"), ids)
}

/// Contributions from per-source Jacobian blocks, computed directly.
pub fn normalized_norms(blocks: &[Vec<f64>]) -> Vec<f64> {
    let norms: Vec<f64> = blocks
        .iter()
        .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    norms.iter().map(|n| n / total).collect()
}
