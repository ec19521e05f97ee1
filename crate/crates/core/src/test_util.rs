//! Seeded random instance generators shared by the unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn standard_vector(n: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn standard_matrix(m: usize, n: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
}

/// Well-conditioned SPD matrix: `M M^T / d + I`.
pub fn spd_matrix(d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let m = standard_matrix(d, d, rng);
    &m * m.transpose() / d as f64 + DMatrix::identity(d, d)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1.0)
}

