//! Problem representation and dense SPD-matrix utilities.
//!
//! The central object is [`ProjectionProblem`]: find the point of the affine
//! set `{x : Ax = b}` closest to an anchor `x0` in the norm induced by a
//! symmetric positive-definite weight matrix. Everything downstream (solver
//! steps, sampling rules, spectral constants) consumes this type read-only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Relative cutoff for singular values in pseudo-inverse solves.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;
/// Relative residual bound accepted as "consistent".
pub const DEFAULT_CONSISTENCY_TOL: f64 = 1e-8;
/// Relative asymmetry tolerated when ingesting a weight matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
struct MatrixRoots {
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

#[derive(Clone, Debug)]
enum SpdKind {
    /// Dimension-agnostic identity; all maps are pass-throughs.
    Identity,
    Dense {
        matrix: DMatrix<f64>,
        factor: Cholesky<f64, Dyn>,
        /// Symmetric square roots, computed on first use.
        roots: OnceLock<std::result::Result<MatrixRoots, String>>,
    },
}

/// A symmetric positive-definite matrix wrapped with its Cholesky factor,
/// exposing `B v`, `B^{-1} v`, and (lazily) `B^{1/2}`, `B^{-1/2}` actions.
#[derive(Clone, Debug)]
pub struct SpdOperator {
    inner: SpdKind,
}

impl SpdOperator {
    /// Exact identity of any dimension.
    pub fn identity() -> Self {
        Self {
            inner: SpdKind::Identity,
        }
    }

    /// Wrap a dense SPD matrix. Rejects non-square, asymmetric (relative to
    /// [`SYMMETRY_TOL`]) and non-positive-definite inputs.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "SPD operator needs a square non-empty matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSpd(format!(
                "asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e} relative"
            )));
        }
        let factor = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Ok(Self {
            inner: SpdKind::Dense {
                matrix,
                factor,
                roots: OnceLock::new(),
            },
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.inner, SpdKind::Identity)
    }

    /// Dimension of the dense variant; `None` for the identity.
    pub fn dim(&self) -> Option<usize> {
        match &self.inner {
            SpdKind::Identity => None,
            SpdKind::Dense { matrix, .. } => Some(matrix.nrows()),
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::DimensionMismatch(format!(
                "operator is {k}x{k}, operand has dimension {d}"
            ))),
            _ => Ok(()),
        }
    }

    /// `B v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            SpdKind::Identity => v.clone(),
            SpdKind::Dense { matrix, .. } => matrix * v,
        }
    }

    /// `B^{-1} v` via the cached factorization.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            SpdKind::Identity => v.clone(),
            SpdKind::Dense { factor, .. } => factor.solve(v),
        }
    }

    /// `B M` for a conforming matrix `M`.
    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            SpdKind::Identity => m.clone(),
            SpdKind::Dense { matrix, .. } => matrix * m,
        }
    }

    /// `B^{-1} M` for a conforming matrix `M`.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            SpdKind::Identity => m.clone(),
            SpdKind::Dense { factor, .. } => factor.solve(m),
        }
    }

    /// `v^T B v`.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        match &self.inner {
            SpdKind::Identity => v.norm_squared(),
            SpdKind::Dense { matrix, .. } => (matrix * v).dot(v),
        }
    }

    /// `v^T B^{-1} v`.
    pub fn inv_quadratic_form(&self, v: &DVector<f64>) -> f64 {
        self.apply_inverse(v).dot(v)
    }

    /// Materialize `B` at dimension `d`.
    pub fn dense(&self, d: usize) -> Result<DMatrix<f64>> {
        self.check_dim(d)?;
        Ok(match &self.inner {
            SpdKind::Identity => DMatrix::identity(d, d),
            SpdKind::Dense { matrix, .. } => matrix.clone(),
        })
    }

    /// Materialize `B^{-1}` at dimension `d`.
    pub fn inv_dense(&self, d: usize) -> Result<DMatrix<f64>> {
        self.check_dim(d)?;
        Ok(match &self.inner {
            SpdKind::Identity => DMatrix::identity(d, d),
            SpdKind::Dense { factor, .. } => factor.solve(&DMatrix::identity(d, d)),
        })
    }

    fn roots(&self) -> Result<Option<&MatrixRoots>> {
        match &self.inner {
            SpdKind::Identity => Ok(None),
            SpdKind::Dense { matrix, roots, .. } => {
                let computed = roots.get_or_init(|| {
                    let eig = SymmetricEigen::new(matrix.clone());
                    let floor = eig.eigenvalues.min();
                    if floor <= 0.0 {
                        return Err(format!("eigenvalue floor {floor:.3e} is not positive"));
                    }
                    let q = &eig.eigenvectors;
                    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
                    let sqrt = q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose();
                    let inv_sqrt =
                        q * DMatrix::from_diagonal(&sqrt_vals.map(|s| 1.0 / s)) * q.transpose();
                    Ok(MatrixRoots { sqrt, inv_sqrt })
                });
                match computed {
                    Ok(r) => Ok(Some(r)),
                    Err(msg) => Err(Error::NotSpd(msg.clone())),
                }
            }
        }
    }

    /// Materialize `B^{1/2}` at dimension `d` (symmetric eigendecomposition).
    pub fn sqrt_dense(&self, d: usize) -> Result<DMatrix<f64>> {
        self.check_dim(d)?;
        Ok(match self.roots()? {
            None => DMatrix::identity(d, d),
            Some(r) => r.sqrt.clone(),
        })
    }

    /// Materialize `B^{-1/2}` at dimension `d`.
    pub fn inv_sqrt_dense(&self, d: usize) -> Result<DMatrix<f64>> {
        self.check_dim(d)?;
        Ok(match self.roots()? {
            None => DMatrix::identity(d, d),
            Some(r) => r.inv_sqrt.clone(),
        })
    }
}

/// The affine projection problem: minimize `||x - x0||_B^2` subject to
/// `Ax = b`, with `B` symmetric positive definite. The system is assumed
/// consistent; [`ProjectionProblem::solve_star`] verifies that.
#[derive(Clone, Debug)]
pub struct ProjectionProblem {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
    weight: SpdOperator,
    anchor: DVector<f64>,
}

impl ProjectionProblem {
    pub fn new(
        matrix: DMatrix<f64>,
        rhs: DVector<f64>,
        weight: SpdOperator,
        anchor: DVector<f64>,
    ) -> Result<Self> {
        let (m, n) = (matrix.nrows(), matrix.ncols());
        if m == 0 || n == 0 {
            return Err(Error::DimensionMismatch("empty system matrix".into()));
        }
        if rhs.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "rhs has length {}, expected {m}",
                rhs.len()
            )));
        }
        if anchor.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "anchor has length {}, expected {n}",
                anchor.len()
            )));
        }
        if let Some(d) = weight.dim() {
            if d != n {
                return Err(Error::DimensionMismatch(format!(
                    "weight is {d}x{d}, expected {n}x{n}"
                )));
            }
        }
        Ok(Self {
            matrix,
            rhs,
            weight,
            anchor,
        })
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn weight(&self) -> &SpdOperator {
        &self.weight
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    /// Same system, different anchor.
    pub fn with_anchor(&self, anchor: DVector<f64>) -> Result<Self> {
        Self::new(
            self.matrix.clone(),
            self.rhs.clone(),
            self.weight.clone(),
            anchor,
        )
    }

    /// `Ax - b`.
    pub fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "x has length {}, expected {}",
                x.len(),
                self.ncols()
            )));
        }
        Ok(&self.matrix * x - &self.rhs)
    }

    /// `v^T B v`; zero exactly when `v = 0`.
    pub fn b_norm_sq(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "v has length {}, expected {}",
                v.len(),
                self.ncols()
            )));
        }
        Ok(self.weight.quadratic_form(v))
    }

    /// The projection of the anchor onto the solution set:
    /// `x* = x0 - B^{-1} A^T (A B^{-1} A^T)^† (A x0 - b)`,
    /// with the pseudo-inverse thresholded at `pinv_tol` relative to the
    /// largest singular value. Errors if the resulting residual exceeds
    /// [`DEFAULT_CONSISTENCY_TOL`] relative.
    pub fn solve_star(&self, pinv_tol: f64) -> Result<DVector<f64>> {
        let r0 = self.residual(&self.anchor)?;
        let binv_at = self.weight.solve_mat(&self.matrix.transpose());
        let gram = &self.matrix * &binv_at;
        let y = svd_pinv_apply(&gram, &r0, pinv_tol);
        let star = &self.anchor - binv_at * y;
        let res = (&self.matrix * &star - &self.rhs).norm();
        let tol = DEFAULT_CONSISTENCY_TOL * (1.0 + self.rhs.norm());
        if res > tol {
            return Err(Error::InconsistentSystem { residual: res, tol });
        }
        Ok(star)
    }
}

/// `M^† v` through an SVD with singular values below `rel_tol * sigma_max`
/// treated as zero.
pub(crate) fn svd_pinv_apply(m: &DMatrix<f64>, v: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = rel_tol * sigma_max;
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let mut coeffs = u.transpose() * v;
    for (i, c) in coeffs.iter_mut().enumerate() {
        let s = svd.singular_values[i];
        *c = if s > cutoff && s > 0.0 { *c / s } else { 0.0 };
    }
    v_t.transpose() * coeffs
}

/// On-disk problem format: `A` and `B` as row-major nested arrays, `B`
/// optionally the string `"identity"`.
#[derive(Serialize, Deserialize)]
struct ProblemFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(rename = "B")]
    weight: WeightField,
    x0: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WeightField {
    Tag(String),
    Dense(Vec<Vec<f64>>),
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::InvalidSpec(format!("{what} has no rows")));
    }
    let n = rows[0].len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidSpec(format!("{what} rows have uneven length")));
    }
    Ok(DMatrix::from_row_iterator(
        m,
        n,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl ProjectionProblem {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        let matrix = rows_to_matrix(&file.a, "A")?;
        let weight = match file.weight {
            WeightField::Tag(t) if t == "identity" => SpdOperator::identity(),
            WeightField::Tag(t) => {
                return Err(Error::InvalidSpec(format!("unknown weight tag {t:?}")))
            }
            WeightField::Dense(rows) => SpdOperator::from_matrix(rows_to_matrix(&rows, "B")?)?,
        };
        Self::new(
            matrix,
            DVector::from_vec(file.b),
            weight,
            DVector::from_vec(file.x0),
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        let weight = match self.weight.dim() {
            None => WeightField::Tag("identity".into()),
            Some(d) => WeightField::Dense(matrix_to_rows(&self.weight.dense(d)?)),
        };
        let file = ProblemFile {
            a: matrix_to_rows(&self.matrix),
            b: self.rhs.iter().copied().collect(),
            weight,
            x0: self.anchor.iter().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}
