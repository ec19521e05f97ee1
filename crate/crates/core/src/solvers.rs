//! The three iteration engines and the driver loop.
//!
//! Every method updates the primal iterate by projecting the current point,
//! in the weighted norm, against a sketched view of the system:
//!
//! - `sp_step`: hard sketched constraint, solved with a thresholded
//!   pseudo-inverse.
//! - `ps_step`: the constraint replaced by a quadratic penalty of strength
//!   `rho`, so the inner matrix is always invertible.
//! - `als_step`: a dual estimate `z` rides along and is refreshed from the
//!   smoothed saddle problem before the primal moves.
//!
//! [`run`] wires a sketch source and a sampling rule into a full solve with a
//! geometric penalty schedule, optional Cesaro tracking, and trace records.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::linsys::{svd_pinv_apply, ProjectionProblem, SpdOperator, DEFAULT_PINV_TOL};
use crate::sketch::{
    add_scaled_metric, capped_candidates_from_losses, convenient_probabilities, draw_convenient,
    draw_gaussian, greedy_select_index_from_losses, sketch_loss_from_gram, FiniteSketchSet,
    GaussianSketch, PreparedSketchSet, RuleKind, SamplingRule, SketchSample,
};

/// Which engine drives the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sketch-and-project: exact projection onto the sketched constraint.
    Sp,
    /// Penalty sketching.
    Ps,
    /// Augmented Lagrangian sketching (primal-dual).
    Als,
}

/// Driver configuration. `rho` follows `rho_{k+1} = min(c rho_k, rho_max)`.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub method: Method,
    pub rho0: f64,
    pub c: f64,
    pub rho_max: f64,
    pub dual_metric: SpdOperator,
    pub max_iters: usize,
    pub residual_tol: f64,
    pub track_cesaro: bool,
    pub record_every: usize,
    pub pinv_tol: f64,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rho0: 1.0,
            c: 1.0,
            rho_max: 1e12,
            dual_metric: SpdOperator::identity(),
            max_iters: 1000,
            residual_tol: 1e-10,
            track_cesaro: false,
            record_every: 1,
            pinv_tol: DEFAULT_PINV_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho0 <= 0.0 {
            return Err(Error::NonPositiveRho(self.rho0));
        }
        if self.c < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "penalty multiplier c = {} must be >= 1",
                self.c
            )));
        }
        if self.rho_max < self.rho0 {
            return Err(Error::InvalidConfig("rho_max below rho0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        if !self.residual_tol.is_finite() || self.residual_tol < 0.0 {
            return Err(Error::InvalidConfig("residual_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// One sampled point along a run, taken before the step at iteration `k` with
/// the sketch drawn for that step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `||x_k - x*||_B^2`.
    pub b_error_sq: f64,
    /// `||x_k - x*||_B^2 + (1/rho_k) ||z_k||_G^2`.
    pub lyapunov: f64,
    /// `f_S(x_k, z_k, rho_k)` at the drawn sketch.
    pub sketched_loss: f64,
    pub rho: f64,
    /// Nanoseconds since the run started (in-memory only; zeroed in CSV
    /// output to keep trace files byte-reproducible).
    pub wall_ns: u64,
}

/// Mutable solver state. `cesaro_*_sum` hold the raw sums of past iterates.
#[derive(Clone, Debug)]
pub struct IterateState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub rho: f64,
    /// Completed steps.
    pub k: usize,
    pub cesaro_x_sum: DVector<f64>,
    pub cesaro_z_sum: DVector<f64>,
    pub track_cesaro: bool,
    pub trace: Vec<TraceRecord>,
}

/// Where sketches come from.
#[derive(Clone, Debug)]
pub enum SketchSource {
    Finite(FiniteSketchSet),
    Gaussian(GaussianSketch),
}

/// Outcome of a full solve. `converged` is false when `max_iters` ran out.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub state: IterateState,
    pub converged: bool,
    pub final_residual: f64,
    /// The reference solution computed once at the start of the run.
    pub star: DVector<f64>,
}

fn sketched_gram(problem: &ProjectionProblem, s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = problem.matrix().transpose() * s; // A^T S
    let binv_t = problem.weight().solve_mat(&t); // B^{-1} A^T S
    let gram = t.transpose() * &binv_t; // S^T A B^{-1} A^T S
    (binv_t, gram)
}

fn check_sketch_dims(problem: &ProjectionProblem, s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() != problem.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "sketch has {} rows, system has {}",
            s.nrows(),
            problem.nrows()
        )));
    }
    Ok(())
}

/// One sketch-and-project step:
/// `x - B^{-1} A^T S (S^T A B^{-1} A^T S)^† S^T (A x - b)`.
pub fn sp_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    s: &DMatrix<f64>,
    pinv_tol: f64,
) -> Result<DVector<f64>> {
    check_sketch_dims(problem, s)?;
    let r = problem.residual(x)?;
    let (binv_t, gram) = sketched_gram(problem, s);
    let y = svd_pinv_apply(&gram, &(s.transpose() * r), pinv_tol);
    Ok(x - binv_t * y)
}

/// One penalty step:
/// `x - B^{-1} A^T S ((1/rho) G + S^T A B^{-1} A^T S)^{-1} S^T (A x - b)`.
pub fn ps_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    s: &DMatrix<f64>,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<DVector<f64>> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    check_sketch_dims(problem, s)?;
    let r = problem.residual(x)?;
    let (binv_t, mut k) = sketched_gram(problem, s);
    add_scaled_metric(&mut k, dual_metric, 1.0 / rho, s.ncols())?;
    let factor =
        Cholesky::new(k).ok_or_else(|| Error::NotSpd("penalized sketched Gram".into()))?;
    let y = factor.solve(&(s.transpose() * r));
    Ok(x - binv_t * y)
}

/// One augmented Lagrangian step. The dual moves first,
/// `z_+ = H (S^T A x - S^T b + (1/rho) G z)`, then the primal follows,
/// `x_+ = x - B^{-1} A^T S z_+`. The pair also satisfies
/// `z_+ = z + rho G^{-1} S^T (A x_+ - b)`.
pub fn als_step(
    problem: &ProjectionProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    s: &DMatrix<f64>,
    dual_metric: &SpdOperator,
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if rho <= 0.0 {
        return Err(Error::NonPositiveRho(rho));
    }
    check_sketch_dims(problem, s)?;
    if z.len() != s.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "dual iterate has length {}, sketch size is {}",
            z.len(),
            s.ncols()
        )));
    }
    let r = problem.residual(x)?;
    let (binv_t, mut k) = sketched_gram(problem, s);
    add_scaled_metric(&mut k, dual_metric, 1.0 / rho, s.ncols())?;
    let factor =
        Cholesky::new(k).ok_or_else(|| Error::NotSpd("penalized sketched Gram".into()))?;
    let u = s.transpose() * r + dual_metric.apply(z) / rho;
    let z_next = factor.solve(&u);
    let x_next = x - binv_t * &z_next;
    Ok((x_next, z_next))
}

/// Cesaro averages `(sum x_l / k, sum z_l / k)` over the first `k` iterates.
pub fn cesaro(state: &IterateState) -> Result<(DVector<f64>, DVector<f64>)> {
    if !state.track_cesaro {
        return Err(Error::TrackingDisabled);
    }
    if state.k == 0 {
        return Err(Error::ZeroIterations);
    }
    let scale = 1.0 / state.k as f64;
    Ok((&state.cesaro_x_sum * scale, &state.cesaro_z_sum * scale))
}

struct Selector<'a> {
    set: Option<&'a FiniteSketchSet>,
    gaussian: Option<&'a GaussianSketch>,
    prepared: Option<PreparedSketchSet>,
    cached_probs: Option<(f64, Vec<f64>)>,
}

impl<'a> Selector<'a> {
    #[allow(clippy::too_many_arguments)]
    fn draw(
        &mut self,
        problem: &ProjectionProblem,
        rule: &SamplingRule,
        dual_metric: &SpdOperator,
        x: &DVector<f64>,
        z: &DVector<f64>,
        rho: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<SketchSample> {
        if let Some(shape) = self.gaussian {
            return draw_gaussian(shape, rng);
        }
        let set = self.set.expect("finite source");
        match rule.kind {
            RuleKind::Uniform => Ok(set.sample(rng.random_range(0..set.len()))),
            RuleKind::Convenient => {
                let refresh = match &self.cached_probs {
                    Some((cached_rho, _)) => *cached_rho != rho,
                    None => true,
                };
                if refresh {
                    let probs = convenient_probabilities(set, problem, rho)?;
                    self.cached_probs = Some((rho, probs));
                }
                let probs = &self.cached_probs.as_ref().expect("cached").1;
                draw_convenient(set, probs, rng)
            }
            RuleKind::Greedy => {
                let losses = self
                    .prepared
                    .as_ref()
                    .expect("prepared")
                    .losses(set, problem, dual_metric, x, z, rho)?;
                let i = greedy_select_index_from_losses(&losses, rule.tau, rng)?;
                Ok(set.sample(i))
            }
            RuleKind::Capped => {
                let losses = self
                    .prepared
                    .as_ref()
                    .expect("prepared")
                    .losses(set, problem, dual_metric, x, z, rho)?;
                let candidates =
                    capped_candidates_from_losses(&losses, rule.tau1, rule.tau2, rule.theta)?;
                Ok(set.sample(candidates[rng.random_range(0..candidates.len())]))
            }
            RuleKind::Gaussian => Err(Error::InvalidConfig(
                "gaussian rule requires a gaussian sketch source".into(),
            )),
        }
    }

    fn loss(
        &self,
        problem: &ProjectionProblem,
        dual_metric: &SpdOperator,
        sample: &SketchSample,
        r: &DVector<f64>,
        z: &DVector<f64>,
        rho: f64,
    ) -> Result<f64> {
        let v = sample.matrix.transpose() * r;
        match (sample.index, &self.prepared) {
            (Some(i), Some(prepared)) => {
                sketch_loss_from_gram(prepared.gram(i), &v, dual_metric, z, rho)
            }
            _ => {
                let (_, gram) = sketched_gram(problem, &sample.matrix);
                sketch_loss_from_gram(&gram, &v, dual_metric, z, rho)
            }
        }
    }
}

/// Run the configured method against a sketch source until the relative
/// residual drops below `residual_tol` or `max_iters` steps have been taken.
/// Trace records sample the pre-step state every `record_every` iterations
/// (the terminal state included when it falls on the cadence).
pub fn run(
    problem: &ProjectionProblem,
    source: &SketchSource,
    rule: &SamplingRule,
    config: &SolverConfig,
) -> Result<RunReport> {
    config.validate()?;
    if rule.kind == RuleKind::Convenient && !config.dual_metric.is_identity() {
        return Err(Error::RequiresIdentityG);
    }

    let (dual_dim, selector) = match source {
        SketchSource::Finite(set) => {
            rule.validate(set.len())?;
            if rule.kind == RuleKind::Gaussian {
                return Err(Error::InvalidConfig(
                    "gaussian rule requires a gaussian sketch source".into(),
                ));
            }
            let p = match set.uniform_sketch_size() {
                Some(p) => p,
                None if config.method == Method::Als => {
                    return Err(Error::InvalidConfig(
                        "augmented runs need a uniform sketch size (one dual vector is carried)"
                            .into(),
                    ))
                }
                None => 0,
            };
            let dual_dim = if config.method == Method::Als { p } else { 0 };
            let selector = Selector {
                set: Some(set),
                gaussian: None,
                prepared: Some(PreparedSketchSet::new(set, problem)?),
                cached_probs: None,
            };
            (dual_dim, selector)
        }
        SketchSource::Gaussian(shape) => {
            if rule.kind != RuleKind::Gaussian {
                return Err(Error::InvalidConfig(
                    "a gaussian sketch source runs with the gaussian rule".into(),
                ));
            }
            if shape.dim() != problem.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "gaussian sketch dimension {} does not match {} rows",
                    shape.dim(),
                    problem.nrows()
                )));
            }
            let dual_dim = if config.method == Method::Als { 1 } else { 0 };
            let selector = Selector {
                set: None,
                gaussian: Some(shape),
                prepared: None,
                cached_probs: None,
            };
            (dual_dim, selector)
        }
    };
    let mut selector = selector;

    let star = problem.solve_star(config.pinv_tol)?;
    let rhs_scale = 1.0 + problem.rhs().norm();
    let mut rng = ChaCha12Rng::seed_from_u64(rule.seed);
    let clock = Instant::now();

    let mut state = IterateState {
        x: problem.anchor().clone(),
        z: DVector::zeros(dual_dim),
        rho: config.rho0,
        k: 0,
        cesaro_x_sum: DVector::zeros(problem.ncols()),
        cesaro_z_sum: DVector::zeros(dual_dim),
        track_cesaro: config.track_cesaro,
        trace: Vec::new(),
    };
    let mut converged = false;
    let mut final_residual;

    loop {
        let r = problem.residual(&state.x)?;
        final_residual = r.norm();

        let sample = selector.draw(
            problem,
            rule,
            &config.dual_metric,
            &state.x,
            &state.z,
            state.rho,
            &mut rng,
        )?;

        if state.k.is_multiple_of(config.record_every) {
            let diff = &state.x - &star;
            let b_error_sq = problem.b_norm_sq(&diff)?;
            let dual_term = if state.z.is_empty() {
                0.0
            } else {
                config.dual_metric.quadratic_form(&state.z) / state.rho
            };
            let sketched_loss =
                selector.loss(problem, &config.dual_metric, &sample, &r, &state.z, state.rho)?;
            state.trace.push(TraceRecord {
                k: state.k,
                b_error_sq,
                lyapunov: b_error_sq + dual_term,
                sketched_loss,
                rho: state.rho,
                wall_ns: clock.elapsed().as_nanos() as u64,
            });
        }

        if final_residual <= config.residual_tol * rhs_scale {
            converged = true;
            break;
        }
        if state.k >= config.max_iters {
            break;
        }

        if config.track_cesaro {
            state.cesaro_x_sum += &state.x;
            state.cesaro_z_sum += &state.z;
        }

        match config.method {
            Method::Sp => {
                state.x = sp_step(problem, &state.x, &sample.matrix, config.pinv_tol)?;
            }
            Method::Ps => {
                state.x = ps_step(
                    problem,
                    &state.x,
                    &sample.matrix,
                    &config.dual_metric,
                    state.rho,
                )?;
            }
            Method::Als => {
                let (x_next, z_next) = als_step(
                    problem,
                    &state.x,
                    &state.z,
                    &sample.matrix,
                    &config.dual_metric,
                    state.rho,
                )?;
                state.x = x_next;
                state.z = z_next;
            }
        }

        state.k += 1;
        state.rho = (state.rho * config.c).min(config.rho_max);
    }

    Ok(RunReport {
        state,
        converged,
        final_residual,
        star,
    })
}
