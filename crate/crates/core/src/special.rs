//! Closed-form fast paths for the named method instances.
//!
//! Every function here is the augmented (primal-dual) update specialized to a
//! particular choice of weight matrix and sketch family, reduced to scalar or
//! small-block arithmetic. Each one agrees with the generic engine under the
//! corresponding parameter substitution; that equivalence is this module's
//! main test surface.
//!
//! Scalar denominators all have the shape `1 + rho * (nonnegative)`, so no
//! update here can divide by zero for `rho >= 0`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::ProjectionProblem;

/// The thirteen specialized methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialKind {
    WilkinsonIr,
    PenaltyIr,
    AugmentedIr,
    AugStochasticDescent,
    AugKaczmarz,
    AugSpectralDescent,
    AugBlockKaczmarz,
    AugCoordNewton,
    ArcdPd,
    ArcdLs,
    AugGaussKaczmarz,
    AugGaussLs,
    AugGaussPd,
}

fn check_row(problem: &ProjectionProblem, i: usize) -> Result<()> {
    if i >= problem.nrows() {
        return Err(Error::RowIndexOutOfRange {
            index: i,
            len: problem.nrows(),
        });
    }
    Ok(())
}

/// Row-action update (`B = I`, `G = 1`, `S = e_i`):
/// `z' = (rho (a_i^T x - b_i) + z) / (1 + rho ||a_i||^2)`, `x' = x - z' a_i`.
/// A zero row is harmless: the denominator stays at one.
pub fn aug_kaczmarz_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    i: usize,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    check_row(problem, i)?;
    let row = problem.matrix().row(i).transpose();
    let gap = row.dot(x) - problem.rhs()[i];
    let z_next = (rho * gap + z) / (1.0 + rho * row.norm_squared());
    Ok((x - row * z_next, z_next))
}

/// Direction-action update (`G = 1`, `S = s`):
/// `z' = (rho s^T (A x - b) + z) / (1 + rho ||A^T s||_{B^{-1}}^2)`,
/// `x' = x - z' B^{-1} A^T s`.
pub fn aug_stochastic_descent_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    s: &DVector<f64>,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    if s.len() != problem.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {}, system has {} rows",
            s.len(),
            problem.nrows()
        )));
    }
    let at_s = problem.matrix().transpose() * s;
    let binv_at_s = problem.weight().apply_inverse(&at_s);
    let gap = s.dot(&problem.residual(x)?);
    let z_next = (rho * gap + z) / (1.0 + rho * at_s.dot(&binv_at_s));
    Ok((x - binv_at_s * z_next, z_next))
}

/// Eigenbasis update for a symmetric positive-definite system (`B = A`,
/// `G = 1`, `S = u_i`); the eigendecomposition is computed once and cached.
#[derive(Clone, Debug)]
pub struct SpectralDescent {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralDescent {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        // SPD gate doubles as the symmetry check.
        crate::linsys::SpdOperator::from_matrix(a.clone())?;
        let eig = nalgebra::SymmetricEigen::new(a.clone());
        let mut eigenvectors = eig.eigenvectors;
        if eigenpair_residual(a, &eig.eigenvalues, &eigenvectors) > 1e-8 {
            gram_schmidt(&mut eigenvectors);
            if eigenpair_residual(a, &eig.eigenvalues, &eigenvectors) > 1e-8 {
                return Err(Error::NotSpd(
                    "eigendecomposition failed the residual check".into(),
                ));
            }
        }
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.len() == 0
    }

    pub fn eigenvalue(&self, i: usize) -> f64 {
        self.eigenvalues[i]
    }

    pub fn eigenvector(&self, i: usize) -> DVector<f64> {
        self.eigenvectors.column(i).into_owned()
    }

    /// `z' = (rho (xi_i u_i^T x - u_i^T b) + z) / (1 + rho xi_i)`,
    /// `x' = x - z' u_i`.
    pub fn step(
        &self,
        rhs: &DVector<f64>,
        x: &DVector<f64>,
        z: f64,
        i: usize,
        rho: f64,
    ) -> Result<(DVector<f64>, f64)> {
        if i >= self.len() {
            return Err(Error::RowIndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        let u = self.eigenvectors.column(i);
        let xi = self.eigenvalues[i];
        let gap = xi * u.dot(x) - u.dot(rhs);
        let z_next = (rho * gap + z) / (1.0 + rho * xi);
        Ok((x - u * z_next, z_next))
    }
}

fn eigenpair_residual(a: &DMatrix<f64>, vals: &DVector<f64>, vecs: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..vals.len() {
        let u = vecs.column(i);
        worst = worst.max((a * u - u * vals[i]).norm());
    }
    worst / a.norm().max(1.0)
}

fn gram_schmidt(vecs: &mut DMatrix<f64>) {
    for j in 0..vecs.ncols() {
        for k in 0..j {
            let proj = vecs.column(k).dot(&vecs.column(j));
            let col_k = vecs.column(k).into_owned();
            let mut col_j = vecs.column_mut(j);
            col_j -= col_k * proj;
        }
        let norm = vecs.column(j).norm();
        if norm > 0.0 {
            vecs.column_mut(j).scale_mut(1.0 / norm);
        }
    }
}

fn gather_rows(problem: &ProjectionProblem, block: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if block.is_empty() {
        return Err(Error::EmptyBlock);
    }
    for &i in block {
        check_row(problem, i)?;
    }
    let n = problem.ncols();
    let mut rows = DMatrix::zeros(block.len(), n);
    let mut rhs = DVector::zeros(block.len());
    for (k, &i) in block.iter().enumerate() {
        rows.row_mut(k).copy_from(&problem.matrix().row(i));
        rhs[k] = problem.rhs()[i];
    }
    Ok((rows, rhs))
}

/// Block row-action update (`B = I`, `G = I`, `S = I_{:C}`):
/// `z' = ((1/rho) I + A_C A_C^T)^{-1} (A_C x - b_C + (1/rho) z)`,
/// `x' = x - A_C^T z'`.
pub fn aug_block_kaczmarz_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    block: &[usize],
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (rows, rhs) = gather_rows(problem, block)?;
    if z.len() != block.len() {
        return Err(Error::DimensionMismatch(format!(
            "dual has length {}, block has {}",
            z.len(),
            block.len()
        )));
    }
    let mut gram = &rows * rows.transpose();
    for d in 0..block.len() {
        gram[(d, d)] += 1.0 / rho;
    }
    let factor = Cholesky::new(gram).ok_or_else(|| Error::NotSpd("shifted block Gram".into()))?;
    let z_next = factor.solve(&(&rows * x - rhs + z / rho));
    Ok((x - rows.transpose() * &z_next, z_next))
}

/// Coordinate-Newton block update for a symmetric positive-definite system
/// (`B = A`, `G = I`, `S = I_{:C}`):
/// `z' = ((1/rho) I + A_CC)^{-1} ((A x - b)_C + (1/rho) z)`, and `x` moves
/// only on the block coordinates, `x' = x - I_{:C} z'`.
pub fn aug_coord_newton_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    block: &[usize],
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if block.is_empty() {
        return Err(Error::EmptyBlock);
    }
    for &i in block {
        check_row(problem, i)?;
    }
    if z.len() != block.len() {
        return Err(Error::DimensionMismatch(format!(
            "dual has length {}, block has {}",
            z.len(),
            block.len()
        )));
    }
    let c = block.len();
    let mut sub = DMatrix::zeros(c, c);
    for (r, &i) in block.iter().enumerate() {
        for (col, &j) in block.iter().enumerate() {
            sub[(r, col)] = problem.matrix()[(i, j)];
        }
    }
    for d in 0..c {
        sub[(d, d)] += 1.0 / rho;
    }
    let factor =
        Cholesky::new(sub).ok_or_else(|| Error::NotSpd("shifted principal block".into()))?;
    let residual = problem.residual(x)?;
    let gap = DVector::from_fn(c, |k, _| residual[block[k]]);
    let z_next = factor.solve(&(gap + z / rho));
    let mut x_next = x.clone();
    for (k, &i) in block.iter().enumerate() {
        x_next[i] -= z_next[k];
    }
    Ok((x_next, z_next))
}

/// Coordinate update for a symmetric positive-definite system (`B = A`,
/// `G = 1`, `S = e_i`): `z' = (rho (a_i^T x - b_i) + z) / (1 + rho A_ii)`,
/// `x' = x - z' e_i`.
pub fn arcd_pd_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    i: usize,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    check_row(problem, i)?;
    let diag = problem.matrix()[(i, i)];
    if diag < 0.0 {
        return Err(Error::NotSpd(format!("negative diagonal entry {diag}")));
    }
    let gap = problem.matrix().row(i).transpose().dot(x) - problem.rhs()[i];
    let z_next = (rho * gap + z) / (1.0 + rho * diag);
    let mut x_next = x.clone();
    x_next[i] -= z_next;
    Ok((x_next, z_next))
}

/// Least-squares coordinate update (`B = A^T A`, `G = 1`, `S = A e_i`):
/// `z' = (rho A_i^T (A x - b) + z) / (1 + rho ||A_i||^2)`, `x' = x - z' e_i`.
pub fn arcd_ls_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    i: usize,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    if i >= problem.ncols() {
        return Err(Error::RowIndexOutOfRange {
            index: i,
            len: problem.ncols(),
        });
    }
    let col = problem.matrix().column(i);
    let gap = col.dot(&problem.residual(x)?);
    let z_next = (rho * gap + z) / (1.0 + rho * col.norm_squared());
    let mut x_next = x.clone();
    x_next[i] -= z_next;
    Ok((x_next, z_next))
}

/// Which Gaussian specialization to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianVariant {
    /// `B = I`: move along `A^T eta`.
    Kaczmarz,
    /// `B = A^T A`: move along `eta` with denominator `1 + rho ||A eta||^2`.
    LeastSquares,
    /// `B = A` (SPD): move along `eta` with denominator `1 + rho ||eta||_A^2`.
    PositiveDefinite,
}

impl GaussianVariant {
    /// Length of the Gaussian direction this variant consumes.
    pub fn direction_len(&self, problem: &ProjectionProblem) -> usize {
        match self {
            GaussianVariant::Kaczmarz => problem.nrows(),
            GaussianVariant::LeastSquares | GaussianVariant::PositiveDefinite => problem.ncols(),
        }
    }
}

/// The scalar Gaussian update with an explicitly supplied direction; the test
/// hook behind [`gaussian_variant_step`].
pub fn gaussian_variant_step_with(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    variant: GaussianVariant,
    eta: &DVector<f64>,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    if eta.len() != variant.direction_len(problem) {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {}, expected {}",
            eta.len(),
            variant.direction_len(problem)
        )));
    }
    let residual = problem.residual(x)?;
    match variant {
        GaussianVariant::Kaczmarz => {
            let at_eta = problem.matrix().transpose() * eta;
            let z_next = (rho * eta.dot(&residual) + z) / (1.0 + rho * at_eta.norm_squared());
            Ok((x - at_eta * z_next, z_next))
        }
        GaussianVariant::LeastSquares => {
            let a_eta = problem.matrix() * eta;
            let z_next = (rho * a_eta.dot(&residual) + z) / (1.0 + rho * a_eta.norm_squared());
            Ok((x - eta * z_next, z_next))
        }
        GaussianVariant::PositiveDefinite => {
            let a_eta = problem.matrix() * eta;
            let energy = eta.dot(&a_eta);
            if energy < 0.0 {
                return Err(Error::NotSpd(format!(
                    "direction has negative energy {energy:.3e}"
                )));
            }
            let z_next = (rho * eta.dot(&residual) + z) / (1.0 + rho * energy);
            Ok((x - eta * z_next, z_next))
        }
    }
}

/// Draw `eta ~ N(0, I)` of the variant's dimension and apply the update.
pub fn gaussian_variant_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: f64,
    variant: GaussianVariant,
    rng: &mut ChaCha12Rng,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    let eta = DVector::from_fn(variant.direction_len(problem), |_, _| {
        rng.sample(StandardNormal)
    });
    gaussian_variant_step_with(problem, x, z, variant, &eta, rho)
}

/// Iterative-refinement family for a square SPD system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementVariant {
    /// Solve `A y = b - A x` exactly.
    Wilkinson,
    /// Solve `(A + I/rho) y = b - A x`.
    Penalty,
    /// Solve `(A + I/rho) y = b - A x + (1/rho)(x - x_prev)`.
    Augmented,
}

/// One refinement step `x + y`. The augmented variant needs the previous
/// iterate; on the first step pass `None` (the memory term vanishes).
pub fn iterative_refinement_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    x_prev: Option<&DVector<f64>>,
    variant: RefinementVariant,
    rho: f64,
) -> Result<DVector<f64>> {
    let a = problem.matrix();
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(
            "iterative refinement needs a square system".into(),
        ));
    }
    let defect = -problem.residual(x)?;
    let y = match variant {
        RefinementVariant::Wilkinson => Cholesky::new(a.clone())
            .ok_or_else(|| Error::NotSpd("refinement system matrix".into()))?
            .solve(&defect),
        RefinementVariant::Penalty | RefinementVariant::Augmented => {
            if rho <= 0.0 {
                return Err(Error::NonPositiveRho(rho));
            }
            let mut shifted = a.clone();
            for d in 0..a.nrows() {
                shifted[(d, d)] += 1.0 / rho;
            }
            let rhs = match variant {
                RefinementVariant::Augmented => {
                    let prev = x_prev.unwrap_or(x);
                    defect + (x - prev) / rho
                }
                _ => defect,
            };
            Cholesky::new(shifted)
                .ok_or_else(|| Error::NotSpd("shifted refinement matrix".into()))?
                .solve(&rhs)
        }
    };
    Ok(x + y)
}
