//! Seeded instance generators shared by the integration suites.

use lagrange_sketch::linsys::{ProjectionProblem, SpdOperator};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
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

/// Consistent system with a planted solution; `weighted` picks a random SPD
/// weight matrix instead of the identity.
pub fn consistent_problem(
    m: usize,
    n: usize,
    weighted: bool,
    rng: &mut ChaCha12Rng,
) -> ProjectionProblem {
    let a = standard_matrix(m, n, rng);
    let x_true = standard_vector(n, rng);
    let b = &a * &x_true;
    let weight = if weighted {
        SpdOperator::from_matrix(spd_matrix(n, rng)).unwrap()
    } else {
        SpdOperator::identity()
    };
    ProjectionProblem::new(a, b, weight, standard_vector(n, rng)).unwrap()
}

/// Square SPD system (identity solve weight).
pub fn spd_problem(n: usize, rng: &mut ChaCha12Rng) -> ProjectionProblem {
    let a = spd_matrix(n, rng);
    let x_true = standard_vector(n, rng);
    let b = &a * &x_true;
    ProjectionProblem::new(a, b, SpdOperator::identity(), standard_vector(n, rng)).unwrap()
}

/// Same system re-expressed with a different solve weight.
pub fn reweighted(problem: &ProjectionProblem, weight: SpdOperator) -> ProjectionProblem {
    ProjectionProblem::new(
        problem.matrix().clone(),
        problem.rhs().clone(),
        weight,
        problem.anchor().clone(),
    )
    .unwrap()
}

pub fn unit_column(m: usize, i: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m, 1);
    s[(i, 0)] = 1.0;
    s
}
