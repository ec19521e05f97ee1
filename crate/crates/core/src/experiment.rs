//! Benchmark harness: problem generation, seeded solver sweeps, CSV trace
//! emission, and JSON report aggregation.
//!
//! A sweep is `methods x trials` independent runs over one problem. The
//! master seed fans out through per-(method, trial) ChaCha streams, so adding
//! trials or methods never perturbs the draws of existing ones, and identical
//! configurations reproduce byte-identical trace files.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{spectral_report, SpectralReport};
use crate::error::{Error, Result};
use crate::linsys::{ProjectionProblem, SpdOperator};
use crate::sketch::{FiniteSketchSet, GaussianSketch, RuleKind, SamplingRule};
use crate::solvers::{
    run, IterateState, Method, RunReport, SketchSource, SolverConfig, TraceRecord,
};
use crate::special::{iterative_refinement_step, RefinementVariant, SpecialKind};

/// Problem input: load from a JSON file or generate synthetically.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ProblemSpec {
    File { path: PathBuf },
    Generator(GeneratorSpec),
}

/// Synthetic problem family: Gaussian `A` (or `M M^T`-based SPD) with the
/// right-hand side built from a planted solution, so consistency holds by
/// construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub m: usize,
    pub n: usize,
    /// Rescale the spectrum so the 2-norm condition number hits this value.
    #[serde(default)]
    pub condition_target: Option<f64>,
    #[serde(default)]
    pub spd: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Sketch-set family used by the generic methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchKindSpec {
    Rows,
    Coordinates,
    Blocks,
    Eigenvectors,
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKindSpec,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    pub rule: SamplingRule,
    #[serde(default)]
    pub seed: u64,
}

fn default_block_size() -> usize {
    1
}

/// One method entry of a sweep. `name` uses the CLI vocabulary: `sp`, `ps`,
/// `als`, `aug-kaczmarz`, `askm`, `arcd-pd`, `arcd-ls`, `aug-block`,
/// `aug-coord-newton`, `aug-spectral`, `aug-gauss-k`, `aug-gauss-ls`,
/// `aug-gauss-pd`, `ir-wilkinson`, `ir-penalty`, `ir-augmented`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(default = "default_rho0")]
    pub rho0: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
}

fn default_rho0() -> f64 {
    1.0
}
fn default_c() -> f64 {
    1.0
}
fn default_rho_max() -> f64 {
    1e12
}
fn default_max_iters() -> usize {
    1000
}
fn default_residual_tol() -> f64 {
    1e-10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub methods: Vec<MethodSpec>,
    pub sketch: SketchSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub output_dir: PathBuf,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_trials() -> usize {
    1
}
fn default_record_every() -> usize {
    1
}

/// Per-run outcome, aggregated into the sweep report. Every field is filled
/// on completion; runs that errored carry the message instead of results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub trial: usize,
    pub trial_seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub final_b_error_sq: Option<f64>,
    pub final_lyapunov: Option<f64>,
    pub wall_time_s: f64,
    /// Per-step contraction factor fitted to this trial's trace.
    pub empirical_rate: Option<f64>,
    /// `1 - mu` (or the penalty-method analogue) from the spectral report.
    pub theoretical_rate: Option<f64>,
    pub rate_respected: Option<bool>,
    pub trace_path: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub summaries: Vec<RunSummary>,
}

/// Generate a consistent problem per the spec. The condition target is hit
/// exactly (up to rounding) by remapping the spectrum linearly onto
/// `[s_max / kappa, s_max]`.
pub fn generate_problem(spec: &GeneratorSpec) -> Result<ProjectionProblem> {
    if spec.m == 0 || spec.n == 0 {
        return Err(Error::InvalidSpec("m and n must be at least 1".into()));
    }
    if spec.spd && spec.m != spec.n {
        return Err(Error::InvalidSpec("spd problems need m = n".into()));
    }
    if let Some(kappa) = spec.condition_target {
        if kappa < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "condition target {kappa} below 1"
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = |r: usize, c: usize, rng: &mut ChaCha12Rng| {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let a = if spec.spd {
        let n = spec.n;
        let factor = normal(n, n, &mut rng);
        let mut a = &factor * factor.transpose() / n as f64;
        let shift = 0.01 * a.trace() / n as f64 + f64::MIN_POSITIVE;
        for d in 0..n {
            a[(d, d)] += shift;
        }
        match spec.condition_target {
            None => a,
            Some(kappa) => {
                let eig = SymmetricEigen::new(a);
                let remapped = remap_spectrum(&eig.eigenvalues, kappa);
                let q = &eig.eigenvectors;
                let rebuilt = q * DMatrix::from_diagonal(&remapped) * q.transpose();
                (&rebuilt + rebuilt.transpose()) * 0.5
            }
        }
    } else {
        let raw = normal(spec.m, spec.n, &mut rng);
        match spec.condition_target {
            None => raw,
            Some(kappa) => {
                let svd = raw.svd(true, true);
                let remapped = remap_spectrum(&svd.singular_values, kappa);
                svd.u.expect("svd requested u")
                    * DMatrix::from_diagonal(&remapped)
                    * svd.v_t.expect("svd requested v_t")
            }
        }
    };

    let x_true = DVector::from_fn(spec.n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = &a * &x_true;
    ProjectionProblem::new(a, b, SpdOperator::identity(), DVector::zeros(spec.n))
}

/// Linear remap of a (positive) spectrum onto `[max / kappa, max]`.
fn remap_spectrum(values: &DVector<f64>, kappa: f64) -> DVector<f64> {
    let hi = values.max();
    let lo = values.min();
    let target_lo = hi / kappa;
    if hi - lo <= f64::EPSILON * hi {
        return DVector::from_element(values.len(), hi);
    }
    values.map(|s| target_lo + (s - lo) / (hi - lo) * (hi - target_lo))
}

/// Parsed method vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    Generic(Method),
    Special(SpecialKind),
    /// `aug-kaczmarz` driven by the greedy rule.
    Askm,
}

pub fn parse_method_name(name: &str) -> Result<MethodKind> {
    use SpecialKind::*;
    Ok(match name {
        "sp" => MethodKind::Generic(Method::Sp),
        "ps" => MethodKind::Generic(Method::Ps),
        "als" => MethodKind::Generic(Method::Als),
        "aug-kaczmarz" => MethodKind::Special(AugKaczmarz),
        "askm" => MethodKind::Askm,
        "arcd-pd" => MethodKind::Special(ArcdPd),
        "arcd-ls" => MethodKind::Special(ArcdLs),
        "aug-block" => MethodKind::Special(AugBlockKaczmarz),
        "aug-coord-newton" => MethodKind::Special(AugCoordNewton),
        "aug-spectral" => MethodKind::Special(AugSpectralDescent),
        "aug-gauss-k" => MethodKind::Special(AugGaussKaczmarz),
        "aug-gauss-ls" => MethodKind::Special(AugGaussLs),
        "aug-gauss-pd" => MethodKind::Special(AugGaussPd),
        "ir-wilkinson" => MethodKind::Special(WilkinsonIr),
        "ir-penalty" => MethodKind::Special(PenaltyIr),
        "ir-augmented" => MethodKind::Special(AugmentedIr),
        other => {
            return Err(Error::InvalidConfig(format!("unknown method {other:?}")))
        }
    })
}

enum ResolvedDriver {
    Engine {
        source: SketchSource,
        rule_kind: RuleKind,
        method: Method,
    },
    Refinement(RefinementVariant),
}

struct ResolvedMethod {
    problem: ProjectionProblem,
    driver: ResolvedDriver,
}

fn reweight(problem: &ProjectionProblem, weight: SpdOperator) -> Result<ProjectionProblem> {
    ProjectionProblem::new(
        problem.matrix().clone(),
        problem.rhs().clone(),
        weight,
        problem.anchor().clone(),
    )
}

fn spd_weight_from_matrix(problem: &ProjectionProblem) -> Result<SpdOperator> {
    SpdOperator::from_matrix(problem.matrix().clone())
}

fn least_squares_weight(problem: &ProjectionProblem) -> Result<SpdOperator> {
    let gram = problem.matrix().transpose() * problem.matrix();
    SpdOperator::from_matrix(gram).map_err(|_| {
        Error::RankDeficient("least-squares weight needs a full-column-rank matrix".into())
    })
}

fn even_blocks(m: usize, block_size: usize, what: &str) -> Result<FiniteSketchSet> {
    if block_size == 0 || !m.is_multiple_of(block_size) {
        return Err(Error::InvalidConfig(format!(
            "{what} requires block_size to divide {m}, got {block_size}"
        )));
    }
    FiniteSketchSet::blocks(m, block_size)
}

/// Materialize the sketch source named by a [`SketchSpec`] for a problem,
/// together with the rule kind that drives it (the gaussian source forces
/// the gaussian rule).
pub fn build_sketch_source(
    spec: &SketchSpec,
    problem: &ProjectionProblem,
) -> Result<(SketchSource, RuleKind)> {
    let source = match spec.kind {
        SketchKindSpec::Rows => SketchSource::Finite(FiniteSketchSet::rows(problem.nrows())?),
        SketchKindSpec::Coordinates => {
            SketchSource::Finite(FiniteSketchSet::coordinate_columns(problem.matrix())?)
        }
        SketchKindSpec::Blocks => {
            SketchSource::Finite(FiniteSketchSet::blocks(problem.nrows(), spec.block_size)?)
        }
        SketchKindSpec::Eigenvectors => {
            SketchSource::Finite(FiniteSketchSet::eigenvectors(problem.matrix())?)
        }
        SketchKindSpec::Gaussian => {
            SketchSource::Gaussian(GaussianSketch::identity(problem.nrows()))
        }
    };
    let rule_kind = match spec.kind {
        SketchKindSpec::Gaussian => RuleKind::Gaussian,
        _ => spec.rule.kind,
    };
    Ok((source, rule_kind))
}

fn resolve_method(
    kind: MethodKind,
    base: &ProjectionProblem,
    sketch: &SketchSpec,
) -> Result<ResolvedMethod> {
    use SpecialKind::*;
    let identity = SpdOperator::identity;
    let resolved = match kind {
        MethodKind::Generic(method) => {
            let (source, rule_kind) = build_sketch_source(sketch, base)?;
            ResolvedMethod {
                problem: base.clone(),
                driver: ResolvedDriver::Engine {
                    source,
                    rule_kind,
                    method,
                },
            }
        }
        MethodKind::Special(AugKaczmarz) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(FiniteSketchSet::rows(base.nrows())?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Askm => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(FiniteSketchSet::rows(base.nrows())?),
                rule_kind: RuleKind::Greedy,
                method: Method::Als,
            },
        },
        MethodKind::Special(ArcdPd) => ResolvedMethod {
            problem: reweight(base, spd_weight_from_matrix(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(FiniteSketchSet::rows(base.nrows())?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Special(ArcdLs) => ResolvedMethod {
            problem: reweight(base, least_squares_weight(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(FiniteSketchSet::coordinate_columns(base.matrix())?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugBlockKaczmarz) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(even_blocks(
                    base.nrows(),
                    sketch.block_size,
                    "aug-block",
                )?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugCoordNewton) => ResolvedMethod {
            problem: reweight(base, spd_weight_from_matrix(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(even_blocks(
                    base.nrows(),
                    sketch.block_size,
                    "aug-coord-newton",
                )?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugSpectralDescent) => ResolvedMethod {
            problem: reweight(base, spd_weight_from_matrix(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Finite(FiniteSketchSet::eigenvectors(base.matrix())?),
                rule_kind: RuleKind::Uniform,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugGaussKaczmarz) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Gaussian(GaussianSketch::identity(base.nrows())),
                rule_kind: RuleKind::Gaussian,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugGaussLs) => ResolvedMethod {
            problem: reweight(base, least_squares_weight(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Gaussian(GaussianSketch::map_through(base.matrix().clone())),
                rule_kind: RuleKind::Gaussian,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugGaussPd) => ResolvedMethod {
            problem: reweight(base, spd_weight_from_matrix(base)?)?,
            driver: ResolvedDriver::Engine {
                source: SketchSource::Gaussian(GaussianSketch::identity(base.nrows())),
                rule_kind: RuleKind::Gaussian,
                method: Method::Als,
            },
        },
        MethodKind::Special(AugStochasticDescent) => {
            return Err(Error::InvalidConfig(
                "aug_stochastic_descent is a library-level step without a sweep driver".into(),
            ))
        }
        MethodKind::Special(WilkinsonIr) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Refinement(RefinementVariant::Wilkinson),
        },
        MethodKind::Special(PenaltyIr) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Refinement(RefinementVariant::Penalty),
        },
        MethodKind::Special(AugmentedIr) => ResolvedMethod {
            problem: reweight(base, identity())?,
            driver: ResolvedDriver::Refinement(RefinementVariant::Augmented),
        },
    };
    Ok(resolved)
}

/// Deterministic refinement driver mirroring the engine loop's trace and
/// stopping behavior (the sketched-loss column is zero for this family).
pub fn run_refinement(
    problem: &ProjectionProblem,
    variant: RefinementVariant,
    config: &SolverConfig,
) -> Result<RunReport> {
    config.validate()?;
    let star = problem.solve_star(config.pinv_tol)?;
    let rhs_scale = 1.0 + problem.rhs().norm();
    let clock = Instant::now();
    let mut state = IterateState {
        x: problem.anchor().clone(),
        z: DVector::zeros(0),
        rho: config.rho0,
        k: 0,
        cesaro_x_sum: DVector::zeros(problem.ncols()),
        cesaro_z_sum: DVector::zeros(0),
        track_cesaro: config.track_cesaro,
        trace: Vec::new(),
    };
    let mut prev: Option<DVector<f64>> = None;
    let mut converged = false;
    let mut final_residual;
    loop {
        final_residual = problem.residual(&state.x)?.norm();
        if state.k.is_multiple_of(config.record_every) {
            let diff = &state.x - &star;
            let b_error_sq = problem.b_norm_sq(&diff)?;
            state.trace.push(TraceRecord {
                k: state.k,
                b_error_sq,
                lyapunov: b_error_sq,
                sketched_loss: 0.0,
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
        }
        let next = iterative_refinement_step(problem, &state.x, prev.as_ref(), variant, state.rho)?;
        prev = Some(std::mem::replace(&mut state.x, next));
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

fn derive_trial_seed(master: u64, method_index: usize, trial: usize) -> u64 {
    let mut rng = ChaCha12Rng::seed_from_u64(master);
    rng.set_stream(((method_index as u64) << 32) ^ trial as u64);
    rng.next_u64()
}

fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Least-squares slope of `ln v` against `k`, with its standard error.
/// Returns `None` when fewer than two positive values remain.
pub fn fit_log_slope(ks: &[f64], vs: &[f64]) -> Option<(f64, f64)> {
    let points: Vec<(f64, f64)> = ks
        .iter()
        .zip(vs)
        .take_while(|(_, v)| **v > 1e-300)
        .map(|(k, v)| (*k, v.ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let se = if points.len() > 2 {
        let ss_res: f64 = points
            .iter()
            .map(|(x, y)| {
                let fitted = mean_y + slope * (x - mean_x);
                (y - fitted).powi(2)
            })
            .sum();
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some((slope, se))
}

/// Comparison of an empirical decay rate against a theoretical envelope.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundComparison {
    pub empirical_rate: f64,
    pub theoretical_rate: f64,
    pub respected: bool,
}

/// Fit the per-step contraction of the trial-averaged Lyapunov column and
/// test it against `1 - mu` from the spectral report. Traces must come from
/// fixed-penalty runs on a shared record cadence.
pub fn compare_to_bound(
    traces: &[&[TraceRecord]],
    report: &SpectralReport,
) -> Result<BoundComparison> {
    compare_rate(traces, report.rate_als)
}

pub fn compare_rate(traces: &[&[TraceRecord]], theoretical_rate: f64) -> Result<BoundComparison> {
    if traces.is_empty() || traces.iter().any(|t| t.is_empty()) {
        return Err(Error::InsufficientData("no trace records".into()));
    }
    for t in traces {
        if t.iter().any(|r| r.rho != t[0].rho) {
            return Err(Error::InvalidConfig(
                "rate comparison needs fixed-penalty traces".into(),
            ));
        }
    }
    let len = traces.iter().map(|t| t.len()).min().expect("non-empty");
    for t in traces {
        if (0..len).any(|i| t[i].k != traces[0][i].k) {
            return Err(Error::InvalidConfig(
                "traces disagree on the record cadence".into(),
            ));
        }
    }
    let ks: Vec<f64> = traces[0][..len].iter().map(|r| r.k as f64).collect();
    let mean_v: Vec<f64> = (0..len)
        .map(|i| traces.iter().map(|t| t[i].lyapunov).sum::<f64>() / traces.len() as f64)
        .collect();

    let spread = mean_v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - mean_v.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = mean_v.iter().copied().fold(0.0f64, f64::max);
    if scale == 0.0 || spread <= 1e-14 * scale {
        // Converged at the start: nothing decays, nothing violated.
        return Ok(BoundComparison {
            empirical_rate: 0.0,
            theoretical_rate,
            respected: true,
        });
    }
    if len < 20 {
        return Err(Error::InsufficientData(format!(
            "{len} records, need at least 20"
        )));
    }
    let (slope, se_slope) = fit_log_slope(&ks, &mean_v)
        .ok_or_else(|| Error::InsufficientData("fewer than two positive values".into()))?;
    let empirical_rate = slope.exp();
    let se_rate = empirical_rate * se_slope;
    Ok(BoundComparison {
        empirical_rate,
        theoretical_rate,
        respected: empirical_rate <= theoretical_rate + 3.0 * se_rate,
    })
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    k: usize,
    b_error_sq: f64,
    lyapunov: f64,
    sketched_loss: f64,
    rho: f64,
    wall_ns: u64,
}

/// Write a trace as CSV. The `wall_ns` column is zeroed on disk so that
/// identical configurations yield byte-identical files; in-memory records
/// keep the measured timings.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for rec in trace {
        writer.serialize(CsvRow {
            k: rec.k,
            b_error_sq: rec.b_error_sq,
            lyapunov: rec.lyapunov,
            sketched_loss: rec.sketched_loss,
            rho: rec.rho,
            wall_ns: 0,
        })?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        out.push(TraceRecord {
            k: row.k,
            b_error_sq: row.b_error_sq,
            lyapunov: row.lyapunov,
            sketched_loss: row.sketched_loss,
            rho: row.rho,
            wall_ns: row.wall_ns,
        });
    }
    Ok(out)
}

/// Resolve the problem named by the spec.
pub fn load_problem(spec: &ProblemSpec) -> Result<ProjectionProblem> {
    match spec {
        ProblemSpec::File { path } => ProjectionProblem::load(path),
        ProblemSpec::Generator(gen) => generate_problem(gen),
    }
}

struct MethodPlan {
    index: usize,
    spec: MethodSpec,
    resolved: ResolvedMethod,
    theoretical_rate: Option<f64>,
}

fn theoretical_rate_for(
    plan_problem: &ProjectionProblem,
    driver: &ResolvedDriver,
    spec: &MethodSpec,
    rule: &SamplingRule,
) -> Option<f64> {
    // Rates are only defined for fixed-penalty engine runs on finite sets.
    if spec.c != 1.0 {
        return None;
    }
    let ResolvedDriver::Engine { source, method, .. } = driver else {
        return None;
    };
    let SketchSource::Finite(set) = source else {
        return None;
    };
    let report = spectral_report(
        set,
        plan_problem,
        &SpdOperator::identity(),
        spec.rho0,
        rule,
    )
    .ok()?;
    match method {
        Method::Als => Some(report.rate_als),
        Method::Ps => Some(report.rate_ps),
        Method::Sp => None,
    }
}

/// Run the full sweep: every method against every trial seed, traces to CSV,
/// summaries into a single JSON report. Trials execute concurrently; the
/// `LS_THREADS` environment variable caps the worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods configured".into()));
    }
    let base = load_problem(&config.problem)?;
    std::fs::create_dir_all(&config.output_dir)?;

    let mut plans = Vec::new();
    for (index, spec) in config.methods.iter().enumerate() {
        let kind = parse_method_name(&spec.name)?;
        let resolved = resolve_method(kind, &base, &config.sketch)?;
        let probe_rule = SamplingRule {
            kind: match &resolved.driver {
                ResolvedDriver::Engine { rule_kind, .. } => *rule_kind,
                ResolvedDriver::Refinement(_) => RuleKind::Uniform,
            },
            seed: 0,
            ..config.sketch.rule
        };
        let theoretical_rate =
            theoretical_rate_for(&resolved.problem, &resolved.driver, spec, &probe_rule);
        plans.push(MethodPlan {
            index,
            spec: spec.clone(),
            resolved,
            theoretical_rate,
        });
    }

    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|m| (0..config.trials).map(move |t| (m, t)))
        .collect();

    let pool = build_pool()?;
    let summaries: Vec<RunSummary> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, t)| run_single(&plans[m], t, config))
            .collect()
    });

    let report = ExperimentReport {
        master_seed: config.master_seed,
        config: config.clone(),
        summaries,
    };
    let report_path = config.output_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn build_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("LS_THREADS") {
        let threads: usize = raw
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("LS_THREADS={raw} is not a number")))?;
        builder = builder.num_threads(threads.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn run_single(plan: &MethodPlan, trial: usize, config: &ExperimentConfig) -> RunSummary {
    let trial_seed = derive_trial_seed(config.master_seed, plan.index, trial);
    let started = Instant::now();
    let mut summary = RunSummary {
        method: plan.spec.name.clone(),
        trial,
        trial_seed,
        iterations: 0,
        converged: false,
        final_b_error_sq: None,
        final_lyapunov: None,
        wall_time_s: 0.0,
        empirical_rate: None,
        theoretical_rate: plan.theoretical_rate,
        rate_respected: None,
        trace_path: None,
        error: None,
    };

    let solver_config = SolverConfig {
        rho0: plan.spec.rho0,
        c: plan.spec.c,
        rho_max: plan.spec.rho_max,
        max_iters: plan.spec.max_iters,
        residual_tol: plan.spec.residual_tol,
        record_every: config.record_every,
        ..SolverConfig::new(Method::Als)
    };

    let outcome = match &plan.resolved.driver {
        ResolvedDriver::Engine {
            source,
            rule_kind,
            method,
        } => {
            let rule = SamplingRule {
                kind: *rule_kind,
                seed: trial_seed,
                ..config.sketch.rule
            };
            let solver_config = SolverConfig {
                method: *method,
                ..solver_config
            };
            run(&plan.resolved.problem, source, &rule, &solver_config)
        }
        ResolvedDriver::Refinement(variant) => {
            run_refinement(&plan.resolved.problem, *variant, &solver_config)
        }
    };

    match outcome {
        Err(e) => summary.error = Some(e.to_string()),
        Ok(report) => {
            summary.iterations = report.state.k;
            summary.converged = report.converged;
            if let Some(last) = report.state.trace.last() {
                summary.final_b_error_sq = Some(last.b_error_sq);
                summary.final_lyapunov = Some(last.lyapunov);
            }
            let ks: Vec<f64> = report.state.trace.iter().map(|r| r.k as f64).collect();
            let vs: Vec<f64> = report.state.trace.iter().map(|r| r.lyapunov).collect();
            if let Some((slope, se)) = fit_log_slope(&ks, &vs) {
                let rate = slope.exp();
                summary.empirical_rate = Some(rate);
                if let Some(theory) = plan.theoretical_rate {
                    summary.rate_respected = Some(rate <= theory + 3.0 * rate * se);
                }
            }
            let file = format!("{}_trial{trial}.csv", sanitize_name(&plan.spec.name));
            let path = config.output_dir.join(&file);
            match write_trace_csv(&path, &report.state.trace) {
                Ok(()) => summary.trace_path = Some(file),
                Err(e) => summary.error = Some(format!("trace write failed: {e}")),
            }
        }
    }
    summary.wall_time_s = started.elapsed().as_secs_f64();
    summary
}

/// Validate a JSON value against the subset of JSON Schema used by the
/// checked-in report schema: `type`, `properties`, `required`, `items`,
/// and `enum`.
pub fn validate_against_schema(
    value: &serde_json::Value,
    schema: &serde_json::Value,
) -> std::result::Result<(), String> {
    fn type_matches(value: &serde_json::Value, ty: &str) -> bool {
        match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_i64() || value.is_u64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        }
    }
    fn walk(
        value: &serde_json::Value,
        schema: &serde_json::Value,
        path: &str,
    ) -> std::result::Result<(), String> {
        if let Some(types) = schema.get("type") {
            let allowed: Vec<String> = match types {
                serde_json::Value::String(s) => vec![s.clone()],
                serde_json::Value::Array(a) => a
                    .iter()
                    .filter_map(|v| v.as_str().map(str::to_owned))
                    .collect(),
                _ => return Err(format!("{path}: malformed type specifier")),
            };
            if !allowed.iter().any(|t| type_matches(value, t)) {
                return Err(format!("{path}: expected type {allowed:?}"));
            }
        }
        if let Some(options) = schema.get("enum").and_then(|e| e.as_array()) {
            if !options.contains(value) {
                return Err(format!("{path}: value not in enum"));
            }
        }
        if let Some(required) = schema.get("required").and_then(|r| r.as_array()) {
            for key in required.iter().filter_map(|k| k.as_str()) {
                if value.get(key).is_none() {
                    return Err(format!("{path}: missing required field {key:?}"));
                }
            }
        }
        if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
            for (key, subschema) in props {
                if let Some(sub) = value.get(key) {
                    walk(sub, subschema, &format!("{path}/{key}"))?;
                }
            }
        }
        if let Some(items) = schema.get("items") {
            if let Some(arr) = value.as_array() {
                for (i, sub) in arr.iter().enumerate() {
                    walk(sub, items, &format!("{path}[{i}]"))?;
                }
            }
        }
        Ok(())
    }
    walk(value, schema, "#")
}
