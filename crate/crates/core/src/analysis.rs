//! Spectral constants, per-sketch operators, and the identity checkers that
//! back the convergence guarantees.
//!
//! For a sketch `S` the four derived operators are
//!
//! ```text
//! H = ((1/rho) G + S^T A B^{-1} A^T S)^{-1}      (dual gain)
//! Z = A^T S H S^T A                              (primal weight)
//! F = ((1/rho) B + A^T S G^{-1} S^T A)^{-1}      (primal gain)
//! W = S^T A F A^T S                              (dual weight)
//! ```
//!
//! and the sketched loss is `f_S(x, z, rho) = 1/2 ||x - x*||_Z^2 +
//! 1/(2 rho) ||z||_W^2`. Expectations over a finite sketch set are always
//! computed exactly as weighted sums; sampling never enters this module.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::{ProjectionProblem, SpdOperator};
use crate::sketch::{
    capped_candidates_from_losses, convenient_probabilities, greedy_expected_loss_from_losses,
    member_losses, validate_exactness, FiniteSketchSet, RuleKind, SamplingRule,
};

/// Eigenvalues below `EIG_ZERO_REL_TOL * lambda_max` count as zero.
pub const EIG_ZERO_REL_TOL: f64 = 1e-10;

/// The four operators derived from one sketch at one penalty level.
#[derive(Clone, Debug)]
pub struct SketchOperators {
    /// `H`: gain applied to the sketched residual in the dual update.
    pub dual_gain: DMatrix<f64>,
    /// `Z`: seminorm weighting the primal error in the sketched loss.
    pub primal_weight: DMatrix<f64>,
    /// `F`: inverse of the penalized primal Hessian.
    pub primal_gain: DMatrix<f64>,
    /// `W`: seminorm weighting the dual variable in the sketched loss.
    pub dual_weight: DMatrix<f64>,
    pub rho: f64,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m.clone())).eigenvalues
}

pub(crate) fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).max()
}

/// Literal smallest eigenvalue, clamped at zero for PSD inputs whose floor is
/// rounding noise.
pub(crate) fn lambda_min_clamped(m: &DMatrix<f64>) -> f64 {
    let eigs = sym_eigenvalues(m);
    let scale = eigs.amax().max(1.0);
    let min = eigs.min();
    if min.abs() <= EIG_ZERO_REL_TOL * scale {
        0.0
    } else {
        min
    }
}

/// Smallest eigenvalue above the relative zero threshold; zero when the
/// matrix has no nonzero spectrum.
pub(crate) fn lambda_min_plus(m: &DMatrix<f64>) -> f64 {
    let eigs = sym_eigenvalues(m);
    let cutoff = EIG_ZERO_REL_TOL * eigs.amax();
    eigs.iter()
        .copied()
        .filter(|l| *l > cutoff && *l > 0.0)
        .reduce(f64::min)
        .unwrap_or(0.0)
}

/// Build `H`, `Z`, `F`, `W` for a sketch via SPD factorizations.
pub fn build_operators(
    problem: &ProjectionProblem,
    s: &DMatrix<f64>,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<SketchOperators> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    if s.nrows() != problem.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "sketch has {} rows, system has {}",
            s.nrows(),
            problem.nrows()
        )));
    }
    let n = problem.ncols();
    let p = s.ncols();
    let t = problem.matrix().transpose() * s; // A^T S
    let binv_t = problem.weight().solve_mat(&t);
    let mut h_inv = t.transpose() * &binv_t;
    crate::sketch::add_scaled_metric(&mut h_inv, dual_metric, 1.0 / rho, p)?;
    let dual_gain = symmetrize(
        Cholesky::new(h_inv)
            .ok_or_else(|| Error::NotSpd("penalized sketched Gram".into()))?
            .inverse(),
    );
    let primal_weight = symmetrize(&t * &dual_gain * t.transpose());

    let g_inv = dual_metric.inv_dense(p)?;
    let f_inv = problem.weight().dense(n)? / rho + &t * g_inv * t.transpose();
    let primal_gain = symmetrize(
        Cholesky::new(symmetrize(f_inv))
            .ok_or_else(|| Error::NotSpd("penalized primal Hessian".into()))?
            .inverse(),
    );
    let dual_weight = symmetrize(t.transpose() * &primal_gain * &t);

    Ok(SketchOperators {
        dual_gain,
        primal_weight,
        primal_gain,
        dual_weight,
        rho,
    })
}

/// `f_S(x, z, rho) = 1/2 ||x - x*||_Z^2 + 1/(2 rho) ||z||_W^2`.
pub fn sketched_loss(
    ops: &SketchOperators,
    x: &DVector<f64>,
    z: &DVector<f64>,
    x_star: &DVector<f64>,
) -> f64 {
    let d = x - x_star;
    let primal = 0.5 * (&ops.primal_weight * &d).dot(&d);
    let dual = if z.is_empty() {
        0.0
    } else {
        (&ops.dual_weight * z).dot(z) / (2.0 * ops.rho)
    };
    (primal + dual).max(0.0)
}

/// `V(x, z, rho) = ||x - x*||_B^2 + (1/rho) ||z||_G^2`.
pub fn lyapunov(
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    x_star: &DVector<f64>,
) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    let diff = x - x_star;
    let primal = problem.b_norm_sq(&diff)?;
    let dual = if z.is_empty() {
        0.0
    } else {
        dual_metric.quadratic_form(z) / rho
    };
    Ok(primal + dual)
}

/// Exact expectation of the sketched loss under the rule's selection
/// distribution at the given iterate.
#[allow(clippy::too_many_arguments)]
pub fn expected_loss(
    set: &FiniteSketchSet,
    rule: &SamplingRule,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    rho: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let losses = member_losses(set, problem, dual_metric, x, z, rho)?;
    match rule.kind {
        RuleKind::Uniform => Ok(losses.iter().sum::<f64>() / losses.len() as f64),
        RuleKind::Convenient => {
            let probs = convenient_probabilities(set, problem, rho)?;
            Ok(losses.iter().zip(&probs).map(|(l, p)| l * p).sum())
        }
        RuleKind::Greedy => greedy_expected_loss_from_losses(&losses, rule.tau),
        RuleKind::Capped => {
            let candidates =
                capped_candidates_from_losses(&losses, rule.tau1, rule.tau2, rule.theta)?;
            Ok(candidates.iter().map(|&i| losses[i]).sum::<f64>() / candidates.len() as f64)
        }
        RuleKind::Gaussian => Err(Error::InvalidConfig(
            "expected loss needs a finite sketch set".into(),
        )),
    }
}

/// The spectral constants governing the convergence rates, all computed from
/// exact expectations over a validated finite sketch set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    /// min of the smallest nonzero eigenvalues of the two normalized
    /// expectations; the augmented contraction constant.
    pub mu: f64,
    /// max of the largest eigenvalues of the two normalized expectations.
    pub eta: f64,
    /// Largest squared singular value of `B^{-1/2} A^T S G^{-1/2}` over the set.
    pub sigma: f64,
    /// Smallest nonzero eigenvalue of the normalized primal expectation.
    pub mu_min: f64,
    /// Literal smallest eigenvalue of the normalized second-order term; zero
    /// whenever that matrix is singular.
    pub mu0: f64,
    /// Convenient-sampling lower-bound constant (stacked-set formula).
    pub mu_c: f64,
    /// Greedy/capped lower-bound constant from the unweighted sums.
    pub mu_g: f64,
    /// `1 - mu_min - mu0 / rho`.
    pub rate_ps: f64,
    /// `1 - mu`.
    pub rate_als: f64,
}

struct MemberSpectra {
    /// `Y (I/rho + Y^T Y)^{-1} Y^T`, the normalized primal operator.
    z_bar: DMatrix<f64>,
    /// `N (I/rho + N)^{-1}`, the normalized dual operator.
    w_bar: DMatrix<f64>,
    /// `Y C^2 Y^T` with `C = (I/rho + N)^{-1}`, the second-order term.
    second: DMatrix<f64>,
    /// `lambda_max(N)`.
    gram_max: f64,
}

fn member_spectra(
    problem: &ProjectionProblem,
    s: &DMatrix<f64>,
    inv_sqrt_b: &Option<DMatrix<f64>>,
    inv_sqrt_g: &Option<DMatrix<f64>>,
    rho: f64,
) -> Result<MemberSpectra> {
    let t = problem.matrix().transpose() * s;
    let mut y = match inv_sqrt_b {
        Some(ib) => ib * t,
        None => t,
    };
    if let Some(ig) = inv_sqrt_g {
        y *= ig;
    }
    let n_mat = symmetrize(y.transpose() * &y);
    let p = n_mat.nrows();
    let mut shifted = n_mat.clone();
    for d in 0..p {
        shifted[(d, d)] += 1.0 / rho;
    }
    let factor =
        Cholesky::new(shifted).ok_or_else(|| Error::NotSpd("shifted sketched Gram".into()))?;
    let c = factor.solve(&DMatrix::identity(p, p));
    let z_bar = symmetrize(&y * &c * y.transpose());
    let w_bar = symmetrize(&n_mat * &c);
    let second = symmetrize(&y * &c * &c * y.transpose());
    let gram_max = sym_eigenvalues(&n_mat).max().max(0.0);
    Ok(MemberSpectra {
        z_bar,
        w_bar,
        second,
        gram_max,
    })
}

/// Compute every spectral constant for a finite set under a sampling rule.
/// Convenient sampling contributes its (normalized) probabilities to the
/// expectations; all other rules use the uniform distribution, with the
/// greedy/capped rates covered by the conservative `mu_g` constant.
pub fn spectral_report(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    rho: f64,
    rule: &SamplingRule,
) -> Result<SpectralReport> {
    let exactness = validate_exactness(set, problem, dual_metric, rho)?;
    if !exactness.passes() {
        return Err(Error::ExactnessViolation(format!(
            "w_min_eig = {:.3e}, null condition = {}",
            exactness.w_min_eig, exactness.null_condition
        )));
    }
    if rule.kind == RuleKind::Convenient && !dual_metric.is_identity() {
        return Err(Error::RequiresIdentityG);
    }

    let q = set.len();
    let n = problem.ncols();
    let p = set
        .uniform_sketch_size()
        .expect("exactness check enforced a uniform sketch size");
    let probs = match rule.kind {
        RuleKind::Convenient => convenient_probabilities(set, problem, rho)?,
        _ => vec![1.0 / q as f64; q],
    };

    let inv_sqrt_b = match problem.weight().is_identity() {
        true => None,
        false => Some(problem.weight().inv_sqrt_dense(n)?),
    };
    let inv_sqrt_g = match dual_metric.is_identity() {
        true => None,
        false => Some(dual_metric.inv_sqrt_dense(p)?),
    };

    let mut expected_z = DMatrix::zeros(n, n);
    let mut expected_w = DMatrix::zeros(p, p);
    let mut expected_second = DMatrix::zeros(n, n);
    let mut sum_z = DMatrix::zeros(n, n);
    let mut sum_w = DMatrix::zeros(p, p);
    let mut sigma = 0.0f64;
    for (i, s) in set.members().iter().enumerate() {
        let spectra = member_spectra(problem, s, &inv_sqrt_b, &inv_sqrt_g, rho)?;
        expected_z += &spectra.z_bar * probs[i];
        expected_w += &spectra.w_bar * probs[i];
        expected_second += &spectra.second * probs[i];
        sum_z += &spectra.z_bar;
        sum_w += &spectra.w_bar;
        sigma = sigma.max(spectra.gram_max);
    }

    let mu_min = lambda_min_plus(&expected_z);
    let mu = mu_min.min(lambda_min_plus(&expected_w));
    let eta = lambda_max(&expected_z).max(lambda_max(&expected_w));
    let mu0 = lambda_min_clamped(&expected_second).max(0.0);
    let mu_g = lambda_min_plus(&sum_z).min(lambda_min_plus(&sum_w)) / q as f64;

    // Stacked-set constant: rho lambda_min^+(S^T A B^{-1} A^T S) over
    // (1 + rho ||B^{-1/2} A^T S||_F^2), with S the horizontal stack.
    let stacked = set.stacked();
    let t = problem.matrix().transpose() * &stacked;
    let gram = symmetrize(t.transpose() * problem.weight().solve_mat(&t));
    let mu_c = rho * lambda_min_plus(&gram) / (1.0 + rho * gram.trace());

    Ok(SpectralReport {
        mu,
        eta,
        sigma,
        mu_min,
        mu0,
        mu_c,
        mu_g,
        rate_ps: 1.0 - mu_min - mu0 / rho,
        rate_als: 1.0 - mu,
    })
}

/// Theoretical envelopes after `k` steps from an initial Lyapunov value `v0`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateBounds {
    /// `(1 - mu_min - mu0/rho)^k v0`.
    pub ps_bound: f64,
    /// `(1 - mu)^k v0`.
    pub als_bound: f64,
    /// `v0 / (mu k)` for the averaged iterates' Lyapunov value.
    pub cesaro_v_bound: f64,
    /// `v0 / k` for the averaged iterates' expected loss.
    pub cesaro_f_bound: f64,
}

pub fn rate_bounds(report: &SpectralReport, k: usize, v0: f64) -> RateBounds {
    RateBounds {
        ps_bound: report.rate_ps.powi(k as i32) * v0,
        als_bound: report.rate_als.powi(k as i32) * v0,
        cesaro_v_bound: v0 / (report.mu * k as f64),
        cesaro_f_bound: v0 / k as f64,
    }
}

/// Frobenius residuals of the five operator identities, raw and scaled by
/// `1 + ||lhs||_F`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IdentityResiduals {
    pub absolute: [f64; 5],
    pub scaled: [f64; 5],
}

impl IdentityResiduals {
    pub fn max_scaled(&self) -> f64 {
        self.scaled.iter().copied().fold(0.0, f64::max)
    }
}

/// Check the five relations tying `H`, `Z`, `F`, `W` together:
/// 1. `F = rho B^{-1} - rho B^{-1} Z B^{-1}`
/// 2. `G H G = rho G - rho W`
/// 3. `H S^T A B^{-1} A^T S H = H - (1/rho) H G H`
/// 4. `A^T S H - Z B^{-1} A^T S H = (1/rho) A^T S H G H`
/// 5. `Z B^{-1} Z = Z - (1/rho) A^T S H G H S^T A`
pub fn verify_appendix_identities(
    ops: &SketchOperators,
    problem: &ProjectionProblem,
    s: &DMatrix<f64>,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<IdentityResiduals> {
    let n = problem.ncols();
    let p = s.ncols();
    let b_inv = problem.weight().inv_dense(n)?;
    let g_dense = dual_metric.dense(p)?;
    let t = problem.matrix().transpose() * s;
    let gram = t.transpose() * problem.weight().solve_mat(&t);

    let h = &ops.dual_gain;
    let z = &ops.primal_weight;
    let f = &ops.primal_gain;
    let w = &ops.dual_weight;
    let hgh = h * &g_dense * h;

    let pairs: [(DMatrix<f64>, DMatrix<f64>); 5] = [
        (f.clone(), (&b_inv - &b_inv * z * &b_inv) * rho),
        (&g_dense * h * &g_dense, (&g_dense - w) * rho),
        (h * &gram * h, h - &hgh / rho),
        (&t * h - z * &b_inv * &t * h, &t * &hgh / rho),
        (z * &b_inv * z, z - &t * &hgh * t.transpose() / rho),
    ];

    let mut absolute = [0.0; 5];
    let mut scaled = [0.0; 5];
    for (i, (lhs, rhs)) in pairs.iter().enumerate() {
        let r = (lhs - rhs).norm();
        absolute[i] = r;
        scaled[i] = r / (1.0 + lhs.norm());
    }
    Ok(IdentityResiduals { absolute, scaled })
}

/// The nonzero spectra of `B^{-1/2} Z B^{-1/2}` and `G^{-1/2} W G^{-1/2}`
/// must coincide; compares them pairwise at 1e-8 relative.
pub fn verify_eig_equality(
    ops: &SketchOperators,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
) -> Result<bool> {
    let n = ops.primal_weight.nrows();
    let p = ops.dual_weight.nrows();
    let z_bar = match problem.weight().is_identity() {
        true => ops.primal_weight.clone(),
        false => {
            let ib = problem.weight().inv_sqrt_dense(n)?;
            &ib * &ops.primal_weight * &ib
        }
    };
    let w_bar = match dual_metric.is_identity() {
        true => ops.dual_weight.clone(),
        false => {
            let ig = dual_metric.inv_sqrt_dense(p)?;
            &ig * &ops.dual_weight * &ig
        }
    };
    let ez = sym_eigenvalues(&z_bar);
    let ew = sym_eigenvalues(&w_bar);
    let scale = ez.amax().max(ew.amax());
    let cutoff = EIG_ZERO_REL_TOL * scale;
    let mut nz: Vec<f64> = ez.iter().copied().filter(|l| *l > cutoff).collect();
    let mut nw: Vec<f64> = ew.iter().copied().filter(|l| *l > cutoff).collect();
    nz.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    nw.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if nz.len() != nw.len() {
        return Ok(false);
    }
    Ok(nz
        .iter()
        .zip(&nw)
        .all(|(a, b)| (a - b).abs() <= 1e-8 * a.max(*b)))
}

/// Outcome of the reformulation-equivalence check.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReformulationReport {
    /// Largest constant dominating the Lyapunov weights on the relevant
    /// range spaces; zero when the stochastic reformulation degenerates.
    pub mu_d: f64,
    pub equivalent: bool,
}

/// Compute `mu_D` as the smaller of the two restricted generalized-eigenvalue
/// floors and, when positive, probe that a vanishing expected loss forces a
/// zero residual and a zero dual vector.
pub fn verify_reformulation_equivalence(
    set: &FiniteSketchSet,
    problem: &ProjectionProblem,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<ReformulationReport> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    let q = set.len();
    let n = problem.ncols();
    let p = set.uniform_sketch_size().ok_or_else(|| {
        Error::InvalidConfig("reformulation check requires a uniform sketch size".into())
    })?;
    let inv_sqrt_b = match problem.weight().is_identity() {
        true => None,
        false => Some(problem.weight().inv_sqrt_dense(n)?),
    };
    let inv_sqrt_g = match dual_metric.is_identity() {
        true => None,
        false => Some(dual_metric.inv_sqrt_dense(p)?),
    };
    let mut expected_z = DMatrix::zeros(n, n);
    let mut expected_w = DMatrix::zeros(p, p);
    for s in set.members() {
        let spectra = member_spectra(problem, s, &inv_sqrt_b, &inv_sqrt_g, rho)?;
        expected_z += &spectra.z_bar / q as f64;
        expected_w += &spectra.w_bar / q as f64;
    }
    let mu_z = lambda_min_plus(&expected_z);
    let mu_w = lambda_min_clamped(&expected_w).max(0.0);
    let mu_d = mu_z.min(mu_w);
    let mut equivalent = mu_d > 1e-10;

    if equivalent {
        let star = problem.solve_star(crate::linsys::DEFAULT_PINV_TOL)?;
        let rule = SamplingRule::uniform(0);
        let zero_z = DVector::zeros(p);
        let at_solution = expected_loss(set, &rule, problem, dual_metric, rho, &star, &zero_z)?;
        equivalent &= at_solution <= 1e-10 * (1.0 + star.norm_squared());

        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha12Rng::seed_from_u64(0x5EED_CAFE)
        };
        for _ in 0..5 {
            // Perturbation inside the weighted row space: the loss must
            // dominate mu_d/2 times the Lyapunov value.
            let w = DVector::from_fn(problem.nrows(), |_, _| {
                rand::Rng::sample(&mut rng, rand_distr::StandardNormal)
            });
            let dir = problem
                .weight()
                .apply_inverse(&(problem.matrix().transpose() * &w));
            if dir.norm() < 1e-12 {
                continue;
            }
            let x = &star + &dir;
            let f = expected_loss(set, &rule, problem, dual_metric, rho, &x, &zero_z)?;
            let v = lyapunov(problem, dual_metric, &x, &zero_z, rho, &star)?;
            equivalent &= f >= 0.4 * mu_d * v;

            let z = DVector::from_fn(p, |_, _| {
                rand::Rng::sample(&mut rng, rand_distr::StandardNormal)
            });
            let f = expected_loss(set, &rule, problem, dual_metric, rho, &star, &z)?;
            let v = lyapunov(problem, dual_metric, &star, &z, rho, &star)?;
            equivalent &= f >= 0.4 * mu_d * v;
        }
    }

    Ok(ReformulationReport { mu_d, equivalent })
}
