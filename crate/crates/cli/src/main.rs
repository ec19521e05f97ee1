//! `lagrange-sketch`: generate problems, sweep the sketching solvers, emit
//! spectral reports, and compare traced decay against the theoretical rates.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use lagrange_sketch::analysis::spectral_report;
use lagrange_sketch::experiment::{
    build_sketch_source, compare_to_bound, generate_problem, load_problem, read_trace_csv,
    run_experiment, ExperimentConfig, GeneratorSpec, ProblemSpec, SketchSpec,
};
use lagrange_sketch::linsys::SpdOperator;
use lagrange_sketch::solvers::{SketchSource, TraceRecord};
use lagrange_sketch::{SamplingRule, SpectralReport};

#[derive(Parser)]
#[command(
    name = "lagrange-sketch",
    version,
    about = "Randomized penalty and augmented Lagrangian sketching solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a consistent problem file.
    Gen(GenArgs),
    /// Run a method sweep: CSV traces plus a JSON report.
    Run(RunArgs),
    /// Compute the spectral constants for a problem and sketch set.
    Analyze(AnalyzeArgs),
    /// Fit traced Lyapunov decay and test it against the reported rate.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec JSON: {"m", "n", "condition_target", "spd", "seed"}.
    #[arg(long)]
    config: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Problem file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON (problem, methods, sketch, trials, output_dir).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Analysis config JSON: {"problem": ..., "sketch": ..., "rho": ...}.
    #[arg(long)]
    config: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Trace CSVs of the trials to average (fixed-penalty runs).
    #[arg(long, num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
    /// Spectral report JSON produced by `analyze`.
    #[arg(long)]
    report: PathBuf,
    /// Comparison file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct AnalyzeConfig {
    problem: ProblemSpec,
    sketch: SketchSpec,
    #[serde(default = "default_rho")]
    rho: f64,
}

fn default_rho() -> f64 {
    1.0
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: &Option<PathBuf>, payload: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, payload)
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{payload}"),
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => {
            let mut spec: GeneratorSpec = read_json(&args.config)?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let problem = generate_problem(&spec)?;
            problem.save(&args.out)?;
            eprintln!(
                "wrote {} ({}x{}, seed {})",
                args.out.display(),
                problem.nrows(),
                problem.ncols(),
                spec.seed
            );
        }
        Command::Run(args) => {
            let mut config: ExperimentConfig = read_json(&args.config)?;
            if let Some(seed) = args.seed {
                config.master_seed = seed;
            }
            if let Some(out) = args.out {
                config.output_dir = out;
            }
            let report = run_experiment(&config)?;
            let failed = report
                .summaries
                .iter()
                .filter(|s| s.error.is_some())
                .count();
            for summary in &report.summaries {
                match &summary.error {
                    Some(err) => eprintln!(
                        "{} trial {}: ERROR {err}",
                        summary.method, summary.trial
                    ),
                    None => eprintln!(
                        "{} trial {}: {} iters, final error {:.3e}{}",
                        summary.method,
                        summary.trial,
                        summary.iterations,
                        summary.final_b_error_sq.unwrap_or(f64::NAN),
                        summary
                            .empirical_rate
                            .map(|r| format!(", rate {r:.4}"))
                            .unwrap_or_default()
                    ),
                }
            }
            eprintln!(
                "report: {}",
                config.output_dir.join("report.json").display()
            );
            if failed > 0 {
                bail!("{failed} run(s) failed; see the report for details");
            }
        }
        Command::Analyze(args) => {
            let config: AnalyzeConfig = read_json(&args.config)?;
            let problem = load_problem(&config.problem)?;
            let (source, rule_kind) = build_sketch_source(&config.sketch, &problem)?;
            let SketchSource::Finite(set) = source else {
                bail!("spectral analysis needs a finite sketch set");
            };
            let rule = SamplingRule {
                kind: rule_kind,
                ..config.sketch.rule
            };
            let report = spectral_report(
                &set,
                &problem,
                &SpdOperator::identity(),
                config.rho,
                &rule,
            )?;
            emit(&args.out, &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Compare(args) => {
            let report: SpectralReport = read_json(&args.report)?;
            let traces: Vec<Vec<TraceRecord>> = args
                .traces
                .iter()
                .map(|p| read_trace_csv(p).map_err(anyhow::Error::from))
                .collect::<anyhow::Result<_>>()?;
            let views: Vec<&[TraceRecord]> = traces.iter().map(Vec::as_slice).collect();
            let outcome = compare_to_bound(&views, &report)?;
            emit(&args.out, &serde_json::to_string_pretty(&outcome)?)?;
        }
    }
    Ok(())
}
