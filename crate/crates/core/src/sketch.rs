//! Sketch-matrix sources and the sampling rules that pick one per iteration.
//!
//! A finite sketch set holds `q` matrices `S_1..S_q`; a rule selects an index
//! each step: uniformly, with trace-weighted ("convenient") probabilities,
//! greedily over the sketched losses of a sampled subset, or by capped
//! thresholding. The Gaussian source draws a fresh sketch vector instead.
//!
//! All draws go through a caller-supplied ChaCha12 generator, so traces are
//! bit-reproducible for a fixed seed.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::{ProjectionProblem, SpdOperator};

/// Largest finite-set size for which the greedy expectation is evaluated with
/// exact integer binomials.
pub const MAX_EXACT_SET_SIZE: usize = 60;

/// One drawn sketching matrix, tagged with the member index when it came from
/// a finite set.
#[derive(Clone, Debug)]
pub struct SketchSample {
    pub matrix: DMatrix<f64>,
    pub index: Option<usize>,
}

/// What a finite sketch set was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchTag {
    /// Coordinate vectors `e_i` of the row space: one row per member.
    Rows,
    /// Columns of the system matrix, `S_i = A e_i`.
    Coordinates,
    /// Column submatrices of the identity over contiguous row blocks.
    Blocks,
    /// Orthonormal eigenvectors of a symmetric positive-definite system matrix.
    Eigenvectors,
    Custom,
}

/// A finite collection of sketching matrices over the same row dimension.
#[derive(Clone, Debug)]
pub struct FiniteSketchSet {
    members: Vec<DMatrix<f64>>,
    tag: SketchTag,
}

impl FiniteSketchSet {
    pub fn custom(members: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::with_tag(members, SketchTag::Custom)
    }

    fn with_tag(members: Vec<DMatrix<f64>>, tag: SketchTag) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidSpec("sketch set has no members".into()));
        }
        let rows = members[0].nrows();
        for (i, s) in members.iter().enumerate() {
            if s.nrows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "sketch {i} has {} rows, expected {rows}",
                    s.nrows()
                )));
            }
            if s.ncols() == 0 {
                return Err(Error::InvalidSpec(format!("sketch {i} has zero columns")));
            }
            if s.amax() == 0.0 {
                return Err(Error::InvalidSpec(format!("sketch {i} is all zeros")));
            }
        }
        Ok(Self { members, tag })
    }

    /// `{e_1, .., e_m}` as single-column sketches.
    pub fn rows(m: usize) -> Result<Self> {
        let members = (0..m)
            .map(|i| {
                let mut s = DMatrix::zeros(m, 1);
                s[(i, 0)] = 1.0;
                s
            })
            .collect();
        Self::with_tag(members, SketchTag::Rows)
    }

    /// Columns of `A` as single-column sketches, `S_i = A e_i`.
    pub fn coordinate_columns(a: &DMatrix<f64>) -> Result<Self> {
        let members = (0..a.ncols()).map(|j| a.column(j).into_owned().reshape_generic(
            nalgebra::Dyn(a.nrows()),
            nalgebra::Dyn(1),
        )).collect();
        Self::with_tag(members, SketchTag::Coordinates)
    }

    /// Contiguous row blocks of size `block_size` (the trailing block may be
    /// shorter when `block_size` does not divide `m`).
    pub fn blocks(m: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidSpec("block size must be positive".into()));
        }
        let mut members = Vec::new();
        let mut start = 0;
        while start < m {
            let len = block_size.min(m - start);
            let mut s = DMatrix::zeros(m, len);
            for k in 0..len {
                s[(start + k, k)] = 1.0;
            }
            members.push(s);
            start += len;
        }
        Self::with_tag(members, SketchTag::Blocks)
    }

    /// Orthonormal eigenvectors of a symmetric positive-definite matrix.
    pub fn eigenvectors(a: &DMatrix<f64>) -> Result<Self> {
        let op = SpdOperator::from_matrix(a.clone())?;
        let _ = op; // construction above is the SPD gate
        let eig = SymmetricEigen::new(a.clone());
        let members = (0..a.ncols())
            .map(|j| {
                eig.eigenvectors
                    .column(j)
                    .into_owned()
                    .reshape_generic(nalgebra::Dyn(a.nrows()), nalgebra::Dyn(1))
            })
            .collect();
        Self::with_tag(members, SketchTag::Eigenvectors)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn tag(&self) -> SketchTag {
        self.tag
    }

    pub fn member(&self, i: usize) -> &DMatrix<f64> {
        &self.members[i]
    }

    pub fn members(&self) -> &[DMatrix<f64>] {
        &self.members
    }

    pub fn sketch_rows(&self) -> usize {
        self.members[0].nrows()
    }

    /// Common sketch size, or `None` when members disagree.
    pub fn uniform_sketch_size(&self) -> Option<usize> {
        let p = self.members[0].ncols();
        self.members.iter().all(|s| s.ncols() == p).then_some(p)
    }

    /// The horizontally stacked matrix `[S_1 S_2 .. S_q]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let m = self.sketch_rows();
        let total: usize = self.members.iter().map(|s| s.ncols()).sum();
        let mut out = DMatrix::zeros(m, total);
        let mut col = 0;
        for s in &self.members {
            out.view_mut((0, col), (m, s.ncols())).copy_from(s);
            col += s.ncols();
        }
        out
    }

    pub fn sample(&self, index: usize) -> SketchSample {
        SketchSample {
            matrix: self.members[index].clone(),
            index: Some(index),
        }
    }
}

/// Selection rule over a sketch source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Uniform,
    Convenient,
    Greedy,
    Capped,
    Gaussian,
}

/// Rule parameters. `tau` drives the greedy subset size, `tau1`/`tau2`/`theta`
/// the capped threshold, and `seed` the per-run generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplingRule {
    pub kind: RuleKind,
    #[serde(default = "default_one")]
    pub tau: usize,
    #[serde(default = "default_one")]
    pub tau1: usize,
    #[serde(default = "default_one")]
    pub tau2: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_one() -> usize {
    1
}

fn default_theta() -> f64 {
    0.5
}

impl SamplingRule {
    pub fn uniform(seed: u64) -> Self {
        Self {
            kind: RuleKind::Uniform,
            tau: 1,
            tau1: 1,
            tau2: 1,
            theta: 0.5,
            seed,
        }
    }

    pub fn convenient(seed: u64) -> Self {
        Self {
            kind: RuleKind::Convenient,
            ..Self::uniform(seed)
        }
    }

    pub fn greedy(tau: usize, seed: u64) -> Self {
        Self {
            kind: RuleKind::Greedy,
            tau,
            ..Self::uniform(seed)
        }
    }

    pub fn capped(tau1: usize, tau2: usize, theta: f64, seed: u64) -> Self {
        Self {
            kind: RuleKind::Capped,
            tau1,
            tau2,
            theta,
            ..Self::uniform(seed)
        }
    }

    pub fn gaussian(seed: u64) -> Self {
        Self {
            kind: RuleKind::Gaussian,
            ..Self::uniform(seed)
        }
    }

    /// Check parameter ranges against a finite set of size `q`.
    pub fn validate(&self, q: usize) -> Result<()> {
        match self.kind {
            RuleKind::Greedy => check_tau(self.tau, q),
            RuleKind::Capped => {
                check_tau(self.tau1, q)?;
                check_tau(self.tau2, q)?;
                if !(0.0..=1.0).contains(&self.theta) {
                    return Err(Error::InvalidConfig(format!(
                        "theta {} outside [0, 1]",
                        self.theta
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn check_tau(tau: usize, q: usize) -> Result<()> {
    if tau < 1 || tau > q {
        Err(Error::TauOutOfRange { tau, q })
    } else {
        Ok(())
    }
}

/// Per-member Gram matrices `S_i^T A B^{-1} A^T S_i` cached once so the
/// per-iteration sketched losses reduce to small Cholesky solves.
#[derive(Clone, Debug)]
pub struct PreparedSketchSet {
    grams: Vec<DMatrix<f64>>,
}

impl PreparedSketchSet {
    pub fn new(set: &FiniteSketchSet, problem: &ProjectionProblem) -> Result<Self> {
        if set.sketch_rows() != problem.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "sketches act on {} rows, system has {}",
                set.sketch_rows(),
                problem.nrows()
            )));
        }
        let grams = set
            .members()
            .iter()
            .map(|s| {
                let t = problem.matrix().transpose() * s; // A^T S, n x p
                let binv_t = problem.weight().solve_mat(&t);
                t.transpose() * binv_t
            })
            .collect();
        Ok(Self { grams })
    }

    pub fn gram(&self, i: usize) -> &DMatrix<f64> {
        &self.grams[i]
    }

    /// Sketched losses `f_i(x, z, rho)` for every member, evaluated through
    /// the residual: `f_i = 1/2 ||S_i^T r||_{H_i}^2 + 1/(2 rho) ||z||_{W_i}^2`
    /// with `||z||_{W_i}^2 = ||z||_G^2 - 1/rho ||G z||_{H_i}^2`, which avoids
    /// the n-dimensional operators entirely.
    pub fn losses(
        &self,
        set: &FiniteSketchSet,
        problem: &ProjectionProblem,
        dual_metric: &SpdOperator,
        x: &DVector<f64>,
        z: &DVector<f64>,
        rho: f64,
    ) -> Result<Vec<f64>> {
        let r = problem.residual(x)?;
        set.members()
            .iter()
            .zip(&self.grams)
            .map(|(s, gram)| {
                let v = s.transpose() * &r;
                sketch_loss_from_gram(gram, &v, dual_metric, z, rho)
            })
            .collect()
    }
}

/// `f_S(x, z, rho)` for a single sketch, given its cached Gram matrix and the
/// sketched residual `S^T (A x - b)`.
pub(crate) fn sketch_loss_from_gram(
    gram: &DMatrix<f64>,
    sketched_residual: &DVector<f64>,
    dual_metric: &SpdOperator,
    z: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    let p = gram.nrows();
    let mut k = gram.clone();
    add_scaled_metric(&mut k, dual_metric, 1.0 / rho, p)?;
    let factor = Cholesky::new(k)
        .ok_or_else(|| Error::NotSpd("penalized sketched Gram lost definiteness".into()))?;
    let primal = 0.5 * factor.solve(sketched_residual).dot(sketched_residual);
    let dual = if z.is_empty() {
        0.0
    } else {
        if z.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "dual iterate has length {}, sketch size is {p}",
                z.len()
            )));
        }
        let gz = dual_metric.apply(z);
        let w_quad = gz.dot(z) - factor.solve(&gz).dot(&gz) / rho;
        w_quad / (2.0 * rho)
    };
    Ok((primal + dual).max(0.0))
}

/// `f_S(x, z, rho)` for an arbitrary sketch matrix against a problem.
pub fn sample_loss(
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    sketch: &DMatrix<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    let t = problem.matrix().transpose() * sketch;
    let gram = t.transpose() * problem.weight().solve_mat(&t);
    let v = sketch.transpose() * problem.residual(x)?;
    sketch_loss_from_gram(&gram, &v, dual_metric, z, rho)
}

/// `k += scale * G` where `G` may be the identity.
pub(crate) fn add_scaled_metric(
    k: &mut DMatrix<f64>,
    metric: &SpdOperator,
    scale: f64,
    p: usize,
) -> Result<()> {
    match metric.dim() {
        None => {
            for i in 0..p {
                k[(i, i)] += scale;
            }
        }
        Some(d) => {
            if d != p {
                return Err(Error::DimensionMismatch(format!(
                    "dual metric is {d}x{d}, sketch size is {p}"
                )));
            }
            *k += metric.dense(d)? * scale;
        }
    }
    Ok(())
}

/// Sketched losses for every member of a finite set (one-off convenience;
/// prepare the set once when calling in a loop).
pub fn member_losses(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> Result<Vec<f64>> {
    PreparedSketchSet::new(set, problem)?.losses(set, problem, dual_metric, x, z, rho)
}

/// Raw trace weights `(1 + rho tr(S_i^T A B^{-1} A^T S_i)) / (1 + rho ||B^{-1/2} A^T S||_F^2)`.
/// These do not sum to one for `q > 1`; see [`convenient_probabilities`].
pub fn convenient_weights(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    rho: f64,
) -> Result<Vec<f64>> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    let traces: Vec<f64> = set
        .members()
        .iter()
        .map(|s| {
            let t = problem.matrix().transpose() * s;
            let binv_t = problem.weight().solve_mat(&t);
            t.zip_fold(&binv_t, 0.0, |acc, a, b| acc + a * b)
        })
        .collect();
    let total: f64 = traces.iter().sum();
    let denom = 1.0 + rho * total;
    Ok(traces.iter().map(|t| (1.0 + rho * t) / denom).collect())
}

/// Normalized selection probabilities for the convenient rule: the raw trace
/// weights rescaled to sum to one. Entries are positive and sum to 1 within
/// 1e-12.
pub fn convenient_probabilities(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    rho: f64,
) -> Result<Vec<f64>> {
    let raw = convenient_weights(set, problem, rho)?;
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Draw member `i` with probability `probs[i]`.
pub fn draw_convenient(
    set: &FiniteSketchSet,
    probs: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<SketchSample> {
    if probs.len() != set.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities for {} members",
            probs.len(),
            set.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| *p <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(
            "probabilities must be positive and sum to one".into(),
        ));
    }
    let u: f64 = rng.random::<f64>() * sum;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(set.sample(i));
        }
    }
    Ok(set.sample(set.len() - 1))
}

/// `tau` distinct indices drawn uniformly via a partial Fisher-Yates pass,
/// returned in ascending order.
fn sample_without_replacement(q: usize, tau: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q).collect();
    for i in 0..tau {
        let j = rng.random_range(i..q);
        idx.swap(i, j);
    }
    let mut picked: Vec<usize> = idx[..tau].to_vec();
    picked.sort_unstable();
    picked
}

/// Greedy (Kaczmarz-Motzkin style) pick over precomputed losses: sample a
/// `tau`-subset uniformly without replacement and return the argmax, ties
/// broken by lowest index.
pub fn greedy_select_index_from_losses(
    losses: &[f64],
    tau: usize,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    check_tau(tau, losses.len())?;
    let picked = sample_without_replacement(losses.len(), tau, rng);
    let mut best = picked[0];
    for &i in &picked[1..] {
        if losses[i] > losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Greedy pick over the sketched losses at the current iterate.
#[allow(clippy::too_many_arguments)]
pub fn greedy_select(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    tau: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SketchSample> {
    let losses = member_losses(set, problem, dual_metric, x, z, rho)?;
    let i = greedy_select_index_from_losses(&losses, tau, rng)?;
    Ok(set.sample(i))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

/// Exact expectation of the greedy rule's selected loss: with losses sorted
/// ascending, the entry at 1-based position `tau + j` is the subset maximum
/// for `C(tau-1+j, tau-1)` of the `C(q, tau)` subsets.
pub fn greedy_expected_loss_from_losses(losses: &[f64], tau: usize) -> Result<f64> {
    let q = losses.len();
    if q > MAX_EXACT_SET_SIZE {
        return Err(Error::QTooLarge(q));
    }
    check_tau(tau, q)?;
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("losses are finite"));
    let total = binomial(q, tau) as f64;
    let mut acc = 0.0;
    for j in 0..=(q - tau) {
        let weight = binomial(tau - 1 + j, tau - 1) as f64 / total;
        acc += weight * sorted[tau - 1 + j];
    }
    Ok(acc)
}

/// Exact expected greedy loss at the current iterate.
pub fn greedy_expected_loss(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    tau: usize,
) -> Result<f64> {
    let losses = member_losses(set, problem, dual_metric, x, z, rho)?;
    greedy_expected_loss_from_losses(&losses, tau)
}

/// The capped rule's threshold: a `theta`-mix of the greedy expectations at
/// subset sizes `tau1` and `tau2`.
pub fn capped_threshold_from_losses(
    losses: &[f64],
    tau1: usize,
    tau2: usize,
    theta: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidConfig(format!("theta {theta} outside [0, 1]")));
    }
    let e1 = greedy_expected_loss_from_losses(losses, tau1)?;
    let e2 = greedy_expected_loss_from_losses(losses, tau2)?;
    Ok(theta * e1 + (1.0 - theta) * e2)
}

/// Indices whose loss meets the capped threshold, ascending. Never empty: the
/// global maximum always qualifies.
pub fn capped_candidates_from_losses(
    losses: &[f64],
    tau1: usize,
    tau2: usize,
    theta: f64,
) -> Result<Vec<usize>> {
    let threshold = capped_threshold_from_losses(losses, tau1, tau2, theta)?;
    let mut out: Vec<usize> = (0..losses.len())
        .filter(|&i| losses[i] >= threshold)
        .collect();
    if out.is_empty() {
        // Guard against rounding when every loss ties the threshold.
        let best = (0..losses.len())
            .max_by(|&a, &b| losses[a].partial_cmp(&losses[b]).expect("finite"))
            .expect("non-empty losses");
        out.push(best);
    }
    Ok(out)
}

/// Capped pick: uniform over the candidates above the threshold.
#[allow(clippy::too_many_arguments)]
pub fn capped_select(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    tau1: usize,
    tau2: usize,
    theta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<SketchSample> {
    let losses = member_losses(set, problem, dual_metric, x, z, rho)?;
    let candidates = capped_candidates_from_losses(&losses, tau1, tau2, theta)?;
    let pick = candidates[rng.random_range(0..candidates.len())];
    Ok(set.sample(pick))
}

/// Gaussian sketch source: a fresh vector per draw (sketch size 1).
#[derive(Clone, Debug)]
pub enum GaussianSketch {
    /// `zeta ~ N(0, I_dim)`.
    Identity { dim: usize },
    /// `zeta = Sigma^{1/2} g` for SPD `Sigma`.
    Covariance { op: SpdOperator, dim: usize },
    /// `S = A eta`, `eta ~ N(0, I_n)`; covariance `A A^T`.
    MapThrough { matrix: DMatrix<f64> },
}

impl GaussianSketch {
    pub fn identity(dim: usize) -> Self {
        Self::Identity { dim }
    }

    pub fn covariance(sigma: DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        let op = SpdOperator::from_matrix(sigma)?;
        Ok(Self::Covariance { op, dim })
    }

    pub fn map_through(matrix: DMatrix<f64>) -> Self {
        Self::MapThrough { matrix }
    }

    /// Row dimension of the drawn sketches.
    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Covariance { dim, .. } => *dim,
            Self::MapThrough { matrix } => matrix.nrows(),
        }
    }
}

/// Draw one Gaussian sketch vector with the requested covariance structure.
pub fn draw_gaussian(shape: &GaussianSketch, rng: &mut ChaCha12Rng) -> Result<SketchSample> {
    let column = match shape {
        GaussianSketch::Identity { dim } => standard_normal(*dim, rng),
        GaussianSketch::Covariance { op, dim } => {
            let g = standard_normal(*dim, rng);
            op.sqrt_dense(*dim)? * g
        }
        GaussianSketch::MapThrough { matrix } => {
            let eta = standard_normal(matrix.ncols(), rng);
            matrix * eta
        }
    };
    let dim = column.len();
    Ok(SketchSample {
        matrix: DMatrix::from_column_slice(dim, 1, column.as_slice()),
        index: None,
    })
}

fn standard_normal(n: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Numerical check of the exactness assumption for a finite set: the summed
/// normalized dual operator must be positive definite, and the null space of
/// `sum_j S_j H_j S_j^T` must sit inside `Null(A^T)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExactnessReport {
    /// Smallest eigenvalue of `sum_j G^{-1/2} W_j G^{-1/2}`.
    pub w_min_eig: f64,
    /// Whether `Null(sum_j S_j H_j S_j^T)` is contained in `Null(A^T)`.
    pub null_condition: bool,
}

impl ExactnessReport {
    pub fn passes(&self) -> bool {
        self.w_min_eig > 0.0 && self.null_condition
    }
}

pub fn validate_exactness(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<ExactnessReport> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    let p = set.uniform_sketch_size().ok_or_else(|| {
        Error::InvalidConfig("exactness check requires a uniform sketch size".into())
    })?;
    let prepared = PreparedSketchSet::new(set, problem)?;
    let g_inv_sqrt = dual_metric.inv_sqrt_dense(p).map_err(|e| match e {
        Error::DimensionMismatch(_) => {
            Error::DimensionMismatch(format!("dual metric does not match sketch size {p}"))
        }
        other => other,
    })?;
    let m = problem.nrows();

    let mut w_sum = DMatrix::zeros(p, p);
    let mut proj_sum = DMatrix::zeros(m, m);
    for (i, s) in set.members().iter().enumerate() {
        // N = G^{-1/2} S^T A B^{-1} A^T S G^{-1/2}; the normalized dual
        // operator is N (I/rho + N)^{-1}, symmetric PSD with spectrum < 1.
        let n_mat = if dual_metric.is_identity() {
            prepared.gram(i).clone()
        } else {
            &g_inv_sqrt * prepared.gram(i) * &g_inv_sqrt
        };
        let mut shifted = n_mat.clone();
        for d in 0..p {
            shifted[(d, d)] += 1.0 / rho;
        }
        let factor = Cholesky::new(shifted)
            .ok_or_else(|| Error::NotSpd("shifted sketched Gram".into()))?;
        let w_bar = factor.solve(&n_mat);
        w_sum += (&w_bar + w_bar.transpose()) * 0.5;

        // H = ((1/rho) G + S^T A B^{-1} A^T S)^{-1}, accumulated as S H S^T.
        let mut k = prepared.gram(i).clone();
        add_scaled_metric(&mut k, dual_metric, 1.0 / rho, s.ncols())?;
        let h = Cholesky::new(k)
            .ok_or_else(|| Error::NotSpd("penalized sketched Gram".into()))?
            .solve(&DMatrix::identity(s.ncols(), s.ncols()));
        proj_sum += s * h * s.transpose();
    }

    let w_eig = SymmetricEigen::new(w_sum);
    let w_floor = w_eig.eigenvalues.min();
    let w_scale = w_eig.eigenvalues.amax().max(1.0);
    // Clamp rounding noise on an exactly singular PSD sum to zero.
    let w_min_eig = if w_floor <= 1e-12 * w_scale { 0.0 } else { w_floor };

    let eig = SymmetricEigen::new((proj_sum.clone() + proj_sum.transpose()) * 0.5);
    let lam_max = eig.eigenvalues.amax();
    let null_cols: Vec<usize> = (0..m)
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-10 * lam_max.max(f64::MIN_POSITIVE))
        .collect();
    let null_condition = if null_cols.is_empty() {
        true
    } else {
        let mut basis = DMatrix::zeros(m, null_cols.len());
        for (k, &i) in null_cols.iter().enumerate() {
            basis.set_column(k, &eig.eigenvectors.column(i));
        }
        let mapped = problem.matrix().transpose() * basis;
        let scale = problem
            .matrix()
            .clone()
            .svd(false, false)
            .singular_values
            .max();
        mapped.clone().svd(false, false).singular_values.max() <= 1e-8 * scale.max(1e-300)
    };

    Ok(ExactnessReport {
        w_min_eig,
        null_condition,
    })
}
