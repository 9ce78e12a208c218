//! `opf-learn`: generate OPF training data, fit the set-point model and run
//! the feasibility-recovering inference pipeline from the command line.

mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "opf-learn", version, about = "Learned AC optimal power flow with power-flow feasibility recovery")]
#[command(after_help = "Cases are given as a built-in name (case2, case3, case14, case39, case57, case118) or a path \
to a MATPOWER case file. Set OPF_LEARN_LOG (error, warn, info, debug, trace) to control logging on stderr. \
Every command that writes files also writes a run manifest (JSON with configuration, seeds, input digests and \
artifact digests) beside its outputs.")]
struct Cli {
    /// Worker threads for parallel stages; defaults to the available parallelism.
    #[arg(long, global = true, env = "OPF_LEARN_JOBS", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a case file.
    #[command(after_help = "Prints a summary and any validation violations. --json prints the normalized network \
(per-unit quantities, dense bus indices); --canonical prints the normalized case text, which parses back to the \
same network. Exits with status 1 if validation fails.")]
    Parse(ParseArgs),
    /// Solve a power flow.
    #[command(after_help = PF_HELP)]
    Pf(PfArgs),
    /// Solve an AC optimal power flow, optionally with a voltage margin.
    #[command(after_help = OPF_HELP)]
    Opf(OpfArgs),
    /// Sample load scenarios and label them with restricted OPF solutions.
    #[command(after_help = "Dataset CSV: header `id,p0..p{L-1},q0..q{L-1},alpha0..alpha{G-2},beta0..beta{G-1},objective`. \
`id` is the index of the draw in the scenario stream (infeasible draws are skipped but counted). p and q are per-unit \
demand at the load buses in ascending bus order. alpha are the normalized active outputs of the non-slack generators \
and beta the normalized voltage set-points of every generator, both in [0, 1]. objective is the OPF cost in $/hr. \
Rows are shuffled with the seed. A manifest is written to <out>.manifest.json.")]
    GenData(GenDataArgs),
    /// Fit the set-point model to a dataset.
    #[command(after_help = "Reads a dataset written by gen-data. The network name and voltage margin stored in the \
model come from --case/--lambda or, when omitted, from the dataset's manifest. The model file is binary: the magic `OPFMLP`, a \
little-endian u16 format version, a u32-length-prefixed JSON header (layer widths, network, voltage margin, seed), \
then little-endian f64 arrays of input means, input scales and the parameters layer by layer. A manifest is written to <out>.manifest.json and the training report (JSON) to --report when given.")]
    Train(TrainArgs),
    /// Predict normalized set-points for one load scenario.
    #[command(after_help = INFER_HELP)]
    Infer(InferArgs),
    /// Predict set-points and recover a power-flow-feasible operating point.
    #[command(after_help = RECOVER_HELP)]
    Recover(RecoverArgs),
    /// Benchmark a model against the OPF baseline on sampled scenarios.
    #[command(after_help = "Writes to the output directory: report.json (aggregate metrics and per-scenario \
outcomes), scenarios.csv (one row per scenario: id, stage, timings in seconds, speed-up, costs in $/hr, relative gap, \
reactive-limit excess norm in MVAr, residual norm, remaining reactive violations), histogram.csv (speed-up bins: \
lower, upper, count, direct, clamped) and manifest.json. Test scenarios are drawn like training samples: draws whose \
unrestricted OPF, or whose restricted OPF at the model's voltage margin, does not converge are discarded and counted. Exits with status 1 if an --assert-* threshold is exceeded.")]
    Bench(BenchArgs),
}

const PF_HELP: &str = "Set-points CSV: header `gen,vm_pu,pg_mw`, generator index in case order (from 0); rows replace the case's \
voltage and dispatch set-points. Fixed-Q CSV: header `gen,q_mvar`; listed generators hold that reactive output and \
their bus voltage becomes free. Loads CSV: header `bus,p_mw,q_mvar` (see `opf-learn help infer`). Output CSV: header \
`bus,vm_pu,va_deg,p_gen_mw,q_gen_mvar`, one row per bus; --json prints the full point with per-generator outputs.";

const OPF_HELP: &str = "Loads CSV: header `bus,p_mw,q_mvar`; rows replace base demand at those load buses. Output CSV: header \
`bus,vm_pu,va_deg,p_gen_mw,q_gen_mvar`; --json adds objective ($/hr), solve_time (s), iterations and per-generator \
outputs. Infeasible problems exit with status 1.";

const INFER_HELP: &str = "Loads CSV: header `bus,p_mw,q_mvar`, one row per load bus (case-file bus label, MW, MVAr); listed rows replace \
the base demand, other load buses keep it. Output CSV: header `gen,bus,alpha,beta,vm_pu,pg_mw`; the slack \
generator has no alpha and no dispatch. --json prints the same data as an object.";

const RECOVER_HELP: &str = "Loads CSV: header `bus,p_mw,q_mvar` (see `opf-learn help infer`). Prints the recovery stage, the generators \
whose reactive output was clamped, timings, residual norm, cost and a limit check; --json prints the same fields \
plus per-bus voltages and per-generator outputs.";

#[derive(Debug, Args)]
struct ParseArgs {
    /// Case name or file.
    case: String,
    /// Print the normalized network as JSON.
    #[arg(long, conflicts_with = "canonical")]
    json: bool,
    /// Print the normalized case text.
    #[arg(long)]
    canonical: bool,
}

#[derive(Debug, Args)]
struct PfArgs {
    case: String,
    /// Demand overrides.
    #[arg(long)]
    loads: Option<PathBuf>,
    /// Generator set-point overrides.
    #[arg(long)]
    setpoints: Option<PathBuf>,
    /// Generators with pinned reactive output.
    #[arg(long)]
    qfixed: Option<PathBuf>,
    /// Convergence tolerance on the largest mismatch, per unit.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
    #[arg(long)]
    json: bool,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OpfArgs {
    case: String,
    #[arg(long)]
    loads: Option<PathBuf>,
    /// Voltage margin: bus voltages are kept in [v_min + lambda, v_max - lambda].
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum CovarianceKind {
    /// Correlation decaying with the hop distance between load buses.
    Decay,
    /// Independent loads.
    Identity,
}

#[derive(Debug, Args, serde::Serialize)]
struct SamplerArgs {
    /// Largest relative deviation of active demand from its base value.
    #[arg(long, default_value_t = 0.7)]
    mu: f64,
    #[arg(long, value_enum, default_value_t = CovarianceKind::Decay)]
    covariance: CovarianceKind,
    /// Standard deviation of each load as a fraction of its base demand.
    #[arg(long, default_value_t = 0.2)]
    sigma_scale: f64,
    /// Correlation factor per hop for the decay covariance.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thinning: usize,
    /// Stop when fewer than this fraction of the first 1000+ draws are feasible.
    #[arg(long, default_value_t = 0.1)]
    min_feasible: f64,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    case: String,
    /// Number of feasible samples to produce.
    #[arg(long)]
    count: usize,
    /// Voltage margin of the restricted OPF.
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset CSV written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Case the dataset was generated for.
    #[arg(long)]
    case: Option<String>,
    /// Voltage margin the dataset was generated with.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Write the training report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Case the model was trained for; defaults to the built-in case named in the model.
    #[arg(long)]
    case: Option<String>,
    /// Demand overrides; the base demand is used when omitted.
    #[arg(long)]
    loads: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecoverArgs {
    case: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    loads: Option<PathBuf>,
    /// Tolerance of the limit check on the recovered point.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Clamp-and-resolve rounds; 1 follows the two-stage procedure, more rounds also pin generators
    /// that leave their reactive limits during a re-solve.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    clamp_rounds: u64,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    case: String,
    #[arg(long)]
    model: PathBuf,
    /// Number of test scenarios with a converged baseline.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    scenarios: u64,
    /// Voltage margin the model was trained with; checked against the model.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Clamp-and-resolve rounds; 1 follows the two-stage procedure, more rounds also pin generators
    /// that leave their reactive limits during a re-solve.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    clamp_rounds: u64,
    /// Evaluate scenarios one at a time for clean timings.
    #[arg(long)]
    sequential: bool,
    /// Number of speed-up histogram bins.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Fail if the mean optimality gap exceeds this value.
    #[arg(long)]
    assert_optimality: Option<f64>,
    /// Fail if the largest power-balance residual norm exceeds this value.
    #[arg(long)]
    assert_feasibility: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OPF_LEARN_LOG", "info")).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs as usize).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}
