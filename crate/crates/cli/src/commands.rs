//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use opf_learn::case_model::{load_builtin, to_case_string};
use opf_learn::eval::{run_benchmark, BenchConfig};
use opf_learn::nn::{decode_outputs, load_model, save_model, train, ModelMeta};
use opf_learn::recovery::{verify, Recovery};
use opf_learn::sampling::{build_covariance, generate_dataset_with_floor, read_dataset, write_dataset, CovarianceStyle};
use opf_learn::{validate, LoadScenario, MlpModel, Network, OpfOptions, OpfSolver, PfOptions, PfSpec, PowerFlow, SamplerConfig, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::io::{self, emit, load_case, read_loads, write_json, PointReport};
use crate::manifest::{beside, read_beside, ManifestBuilder};
use crate::{BenchArgs, Command, CovarianceKind, GenDataArgs, InferArgs, OpfArgs, ParseArgs, PfArgs, RecoverArgs, SamplerArgs, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Parse(args) => parse(args),
        Command::Pf(args) => pf(args),
        Command::Opf(args) => opf(args),
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_model(args),
        Command::Infer(args) => infer(args),
        Command::Recover(args) => recover(args),
        Command::Bench(args) => bench(args),
    }
}

/// Writes the manifest beside `out` when results went to a file.
fn finish_single(mut manifest: ManifestBuilder, out: Option<&Path>) -> Result<()> {
    if let Some(out) = out {
        manifest.artifact(out)?;
        manifest.write(&beside(out))?;
    }
    Ok(())
}

fn loads_or_base(network: &Network, path: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<LoadScenario> {
    match path {
        Some(p) => {
            manifest.input_file(p)?;
            read_loads(network, p)
        }
        None => Ok(LoadScenario::base(network)),
    }
}

fn load_model_file(path: &Path, manifest: &mut ManifestBuilder) -> Result<MlpModel> {
    manifest.input_file(path)?;
    load_model(io::open(path)?).with_context(|| format!("nn: model file {}", path.display()))
}

fn check_model_fits(model: &MlpModel, network: &Network) -> Result<()> {
    let widths = MlpModel::architecture(network.n_load(), network.n_gen());
    if model.n_inputs() != widths[0] || model.n_outputs() != *widths.last().unwrap() {
        bail!(
            "nn: model maps {} inputs to {} outputs but {} needs {} and {}",
            model.n_inputs(),
            model.n_outputs(),
            network.name,
            widths[0],
            widths.last().unwrap()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CaseSummary<'a> {
    name: &'a str,
    base_mva: f64,
    buses: usize,
    generators: usize,
    branches: usize,
    loads: usize,
    violations: Vec<String>,
}

fn parse(args: ParseArgs) -> Result<()> {
    let case = load_case(&args.case)?;
    let net = &case.network;
    let violations: Vec<String> = validate(net).iter().map(|v| v.to_string()).collect();
    let mut out = std::io::stdout().lock();
    if args.json {
        write_json(&mut out, net)?;
    } else if args.canonical {
        out.write_all(to_case_string(net).as_bytes())?;
    } else {
        let summary = CaseSummary {
            name: &net.name,
            base_mva: net.base_mva,
            buses: net.n_bus(),
            generators: net.n_gen(),
            branches: net.branches.len(),
            loads: net.n_load(),
            violations: violations.clone(),
        };
        writeln!(out, "name: {}", summary.name)?;
        writeln!(out, "base MVA: {}", summary.base_mva)?;
        writeln!(out, "buses: {}  generators: {}  branches: {}  loads: {}", summary.buses, summary.generators, summary.branches, summary.loads)?;
        for v in &summary.violations {
            writeln!(out, "violation: {v}")?;
        }
    }
    if !violations.is_empty() {
        bail!("case_model: {} failed validation with {} violation(s)", net.name, violations.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct PfOutput {
    iterations: usize,
    #[serde(flatten)]
    point: PointReport,
}

fn pf(args: PfArgs) -> Result<()> {
    let config = json!({ "case": args.case, "loads": args.loads, "setpoints": args.setpoints, "qfixed": args.qfixed,
        "tol": args.tol, "max_iter": args.max_iter });
    let mut manifest = ManifestBuilder::new("pf", config);
    let case = load_case(&args.case)?;
    manifest.input(case.digest);
    let net = &case.network;
    let mut spec = PfSpec::from_case(net);
    spec.loads = loads_or_base(net, args.loads.as_deref(), &mut manifest)?;
    if let Some(path) = &args.setpoints {
        manifest.input_file(path)?;
        (spec.v_setpoints, spec.p_setpoints) = io::read_setpoints(net, path)?;
    }
    if let Some(path) = &args.qfixed {
        manifest.input_file(path)?;
        spec.q_fixed = io::read_qfixed(net, path)?;
    }
    let flow = PowerFlow::new(net);
    let options = PfOptions { tol: args.tol, max_iter: args.max_iter, ..PfOptions::default() };
    let solution = if spec.q_fixed.is_empty() { flow.solve(&spec, &options) } else { flow.solve_modified(&spec, &options) }
        .context("powerflow")?;
    info!("power flow converged in {} iterations", solution.iterations);
    let report = PointReport::new(net, &flow.ybus, &solution.point);
    emit(args.out.as_ref(), |w| {
        if args.json {
            write_json(w, &PfOutput { iterations: solution.iterations, point: report })
        } else {
            report.write_csv(w)
        }
    })?;
    finish_single(manifest, args.out.as_deref())
}

#[derive(Serialize)]
struct OpfOutput {
    objective: f64,
    solve_time: f64,
    iterations: usize,
    lambda: f64,
    #[serde(flatten)]
    point: PointReport,
}

fn opf(args: OpfArgs) -> Result<()> {
    let config = json!({ "case": args.case, "loads": args.loads, "lambda": args.lambda });
    let mut manifest = ManifestBuilder::new("opf", config);
    let case = load_case(&args.case)?;
    manifest.input(case.digest);
    let net = &case.network;
    let loads = loads_or_base(net, args.loads.as_deref(), &mut manifest)?;
    let solver = OpfSolver::new(net);
    let solution = solver.solve(&loads, args.lambda, None, &OpfOptions::default()).context("acopf")?;
    info!(
        "objective {:.4} $/hr after {} iterations in {:.4} s",
        solution.objective, solution.iterations, solution.solve_time
    );
    let report = PointReport::new(net, &PowerFlow::new(net).ybus, &solution.point);
    emit(args.out.as_ref(), |w| {
        if args.json {
            write_json(w, &OpfOutput {
                objective: solution.objective,
                solve_time: solution.solve_time,
                iterations: solution.iterations,
                lambda: solution.lambda,
                point: report,
            })
        } else {
            report.write_csv(w)
        }
    })?;
    finish_single(manifest, args.out.as_deref())
}

fn sampler_config(net: &Network, args: &SamplerArgs, seed: u64) -> Result<SamplerConfig> {
    let style = match args.covariance {
        CovarianceKind::Decay => CovarianceStyle::DistanceDecay { scale: args.sigma_scale, rho: args.rho },
        CovarianceKind::Identity => CovarianceStyle::ScaledIdentity { scale: args.sigma_scale },
    };
    let sigma = build_covariance(net, style).context("sampling")?;
    SamplerConfig::new(args.mu, sigma, args.burn_in, args.thinning, seed).context("sampling")
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = json!({ "case": args.case, "count": args.count, "lambda": args.lambda, "sampler": args.sampler,
        "out": args.out });
    let mut manifest = ManifestBuilder::new("gen-data", config);
    manifest.seed("sampler", args.seed);
    let case = load_case(&args.case)?;
    manifest.input(case.digest);
    let net = &case.network;
    let sampler = sampler_config(net, &args.sampler, args.seed)?;
    let dataset = generate_dataset_with_floor(net, &sampler, args.lambda, args.count, args.sampler.min_feasible)
        .context("sampling")?;
    info!("{} samples from {} draws ({} discarded)", dataset.samples.len(), dataset.attempted, dataset.discarded);
    let mut w = io::create(&args.out)?;
    write_dataset(&mut w, net.n_load(), net.n_gen(), &dataset.samples).context("sampling")?;
    w.flush()?;
    drop(w);
    manifest.artifact(&args.out)?;
    manifest.write(&beside(&args.out))
}

fn train_model(args: TrainArgs) -> Result<()> {
    let data_manifest = read_beside(&args.data);
    let from_manifest = |key: &str| data_manifest.as_ref().and_then(|m| m.config.get(key).cloned());
    let case_arg = args.case.clone().or_else(|| from_manifest("case").and_then(|v| v.as_str().map(String::from)));
    let lambda = args.lambda.or_else(|| from_manifest("lambda").and_then(|v| v.as_f64()));
    let cfg = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        validation_fraction: args.validation_fraction,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let config = json!({ "data": args.data, "case": case_arg, "lambda": lambda, "train": cfg, "out": args.out,
        "report": args.report });
    let mut manifest = ManifestBuilder::new("train", config);
    manifest.seed("train", args.seed);
    manifest.input_file(&args.data)?;
    let (n_load, n_gen, samples) =
        read_dataset(io::open(&args.data)?).with_context(|| format!("sampling: dataset {}", args.data.display()))?;
    let network = match &case_arg {
        Some(arg) => {
            let case = load_case(arg)?;
            manifest.input(case.digest);
            if case.network.n_load() != n_load || case.network.n_gen() != n_gen {
                bail!(
                    "sampling: dataset has {n_load} loads and {n_gen} generators, {} has {} and {}",
                    case.network.name,
                    case.network.n_load(),
                    case.network.n_gen()
                );
            }
            case.network.name
        }
        None => {
            warn!("no case given and no dataset manifest found; the model will not name its network");
            String::new()
        }
    };
    let lambda = lambda.unwrap_or_else(|| {
        warn!("no voltage margin given and no dataset manifest found; recording 0");
        0.0
    });
    let meta = ModelMeta { network, lambda, seed: args.seed };
    let (model, report) = train(&samples, &cfg, meta).context("nn")?;
    info!(
        "best validation loss {:.3e} at epoch {} ({} train / {} validation samples, {:.1} s)",
        report.best_validation, report.best_epoch, report.n_train, report.n_validation, report.seconds
    );
    let mut w = io::create(&args.out)?;
    save_model(&model, &mut w).context("nn")?;
    w.flush()?;
    drop(w);
    manifest.artifact(&args.out)?;
    if let Some(path) = &args.report {
        let mut w = io::create(path)?;
        write_json(&mut w, &report)?;
        drop(w);
        manifest.artifact(path)?;
    }
    manifest.write(&beside(&args.out))
}

/// The case named on the command line or, failing that, the built-in case
/// the model was trained for.
fn model_network(arg: Option<&str>, model: &MlpModel, manifest: &mut ManifestBuilder) -> Result<Network> {
    let net = match arg {
        Some(arg) => {
            let case = load_case(arg)?;
            manifest.input(case.digest);
            case.network
        }
        None => load_builtin(&model.meta.network).with_context(|| {
            format!("model names network {:?}, which is not built in; pass --case", model.meta.network)
        })?,
    };
    check_model_fits(model, &net)?;
    Ok(net)
}

#[derive(Serialize)]
struct InferRow {
    gen: usize,
    bus: i64,
    alpha: Option<f64>,
    beta: f64,
    vm_pu: f64,
    pg_mw: Option<f64>,
}

fn infer(args: InferArgs) -> Result<()> {
    let config = json!({ "model": args.model, "case": args.case, "loads": args.loads });
    let mut manifest = ManifestBuilder::new("infer", config);
    let model = load_model_file(&args.model, &mut manifest)?;
    let net = model_network(args.case.as_deref(), &model, &mut manifest)?;
    let loads = loads_or_base(&net, args.loads.as_deref(), &mut manifest)?;
    let y = model.forward(&loads.to_features()).context("nn")?;
    let decoded = decode_outputs(&y, &net);
    let slack = net.slack_generator();
    let mut alpha = y.alpha.iter();
    let rows: Vec<InferRow> = (0..net.n_gen())
        .map(|g| {
            let is_slack = Some(g) == slack;
            InferRow {
                gen: g,
                bus: net.buses[net.generators[g].bus].id,
                alpha: if is_slack { None } else { alpha.next().copied() },
                beta: y.beta[g],
                vm_pu: decoded.v_gen[g],
                pg_mw: (!is_slack).then(|| decoded.p_gen[g] * net.base_mva),
            }
        })
        .collect();
    emit(args.out.as_ref(), |w| {
        if args.json {
            write_json(w, &json!({ "network": net.name, "generators": rows }))
        } else {
            let mut csv = csv::Writer::from_writer(w);
            for row in &rows {
                csv.serialize(row)?;
            }
            csv.flush()?;
            Ok(())
        }
    })?;
    finish_single(manifest, args.out.as_deref())
}

#[derive(Serialize)]
struct ClampRow {
    gen: usize,
    bus: i64,
    q_free_mvar: f64,
    q_clamped_mvar: f64,
}

#[derive(Serialize)]
struct RecoverOutput {
    stage: String,
    clamped: Vec<ClampRow>,
    timings: opf_learn::recovery::RecoveryTimings,
    total_time: f64,
    residual_norm: f64,
    cost: f64,
    limits_ok: bool,
    limit_violations: Vec<String>,
    #[serde(flatten)]
    point: PointReport,
}

fn recover(args: RecoverArgs) -> Result<()> {
    let config = json!({ "case": args.case, "model": args.model, "loads": args.loads, "tol": args.tol,
        "clamp_rounds": args.clamp_rounds });
    let mut manifest = ManifestBuilder::new("recover", config);
    let model = load_model_file(&args.model, &mut manifest)?;
    let net = model_network(Some(&args.case), &model, &mut manifest)?;
    let loads = loads_or_base(&net, args.loads.as_deref(), &mut manifest)?;
    let recovery = Recovery::new(&net, &model).with_clamp_rounds(args.clamp_rounds as usize);
    let result = recovery.recover(&loads).context("recovery")?;
    let check = verify(&net, &result.point, args.tol);
    let base = net.base_mva;
    let output = RecoverOutput {
        stage: format!("{:?}", result.stage),
        clamped: result
            .clamps
            .iter()
            .map(|c| ClampRow {
                gen: c.generator,
                bus: net.buses[net.generators[c.generator].bus].id,
                q_free_mvar: c.q_free * base,
                q_clamped_mvar: c.q_clamped * base,
            })
            .collect(),
        timings: result.timings,
        total_time: result.timings.total(),
        residual_norm: result.residual_norm,
        cost: net.cost(&result.point.p_gen),
        limits_ok: check.is_clean(),
        limit_violations: check
            .violations
            .iter()
            .chain(&check.slack_active)
            .map(|c| format!("{:?} (slack {:.3e})", c.constraint, c.slack))
            .collect(),
        point: PointReport::new(&net, &recovery.pf.ybus, &result.point),
    };
    emit(args.out.as_ref(), |w| {
        if args.json {
            return write_json(w, &output);
        }
        writeln!(w, "stage: {}", output.stage)?;
        let clamped: Vec<String> = output.clamped.iter().map(|c| format!("{} (bus {})", c.gen, c.bus)).collect();
        writeln!(w, "clamped generators: [{}]", clamped.join(", "))?;
        writeln!(
            w,
            "timings (s): nn {:.3e}  pf1 {:.3e}  pf2 {:.3e}  total {:.3e}",
            output.timings.nn, output.timings.pf1, output.timings.pf2, output.total_time
        )?;
        writeln!(w, "residual norm: {:.3e}", output.residual_norm)?;
        writeln!(w, "cost ($/hr): {:.4}", output.cost)?;
        writeln!(w, "limits ok: {}", output.limits_ok)?;
        for v in &output.limit_violations {
            writeln!(w, "violation: {v}")?;
        }
        Ok(())
    })?;
    finish_single(manifest, args.out.as_deref())
}

fn bench(args: BenchArgs) -> Result<()> {
    let config = json!({ "case": args.case, "model": args.model, "scenarios": args.scenarios, "lambda": args.lambda,
        "sampler": args.sampler, "sequential": args.sequential, "bins": args.bins, "clamp_rounds": args.clamp_rounds,
        "assert_optimality": args.assert_optimality, "assert_feasibility": args.assert_feasibility, "out": args.out });
    let mut manifest = ManifestBuilder::new("bench", config);
    manifest.seed("scenarios", args.seed);
    let model = load_model_file(&args.model, &mut manifest)?;
    let net = model_network(Some(&args.case), &model, &mut manifest)?;
    if let Some(lambda) = args.lambda {
        if lambda != model.meta.lambda {
            bail!("eval: --lambda {lambda} does not match the model's voltage margin {}", model.meta.lambda);
        }
    }
    let bench = BenchConfig {
        scenarios: args.scenarios as usize,
        seed: args.seed,
        sampler: sampler_config(&net, &args.sampler, args.seed)?,
        sequential: args.sequential,
        min_feasible_rate: args.sampler.min_feasible,
        clamp_rounds: args.clamp_rounds as usize,
    };
    let report = run_benchmark(&net, &model, &bench).context("eval")?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let files = [args.out.join("report.json"), args.out.join("scenarios.csv"), args.out.join("histogram.csv")];
    report.write_json(io::create(&files[0])?)?;
    report.write_scenarios_csv(io::create(&files[1])?)?;
    report.write_histogram_csv(io::create(&files[2])?, args.bins)?;
    for f in &files {
        manifest.artifact(f)?;
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!(
        "scenarios: {} ({} draws without a converged baseline, {} infeasible at the model's margin, {} recovery failures)",
        report.t, report.baseline_failures, report.restricted_infeasible, report.recovery_failures
    );
    println!("speed-up factor: {:.3}", report.sf);
    println!("optimality gap: {:.3e}", report.optimality);
    println!("feasibility: {:.3e}", report.feasibility);
    println!("delta_q (MVAr): {:.4}", report.delta_q);
    println!("stages: {} direct, {} clamped", report.direct_count, report.clamped_count);
    println!("reactive violations after recovery: {}", report.q_violations_after_recovery);
    let mut failed = Vec::new();
    if let Some(limit) = args.assert_optimality {
        if !(report.optimality <= limit) {
            failed.push(format!("optimality gap {:.3e} exceeds {limit:.3e}", report.optimality));
        }
    }
    if let Some(limit) = args.assert_feasibility {
        if !(report.feasibility <= limit) {
            failed.push(format!("feasibility {:.3e} exceeds {limit:.3e}", report.feasibility));
        }
    }
    if report.recovery_failures > 0 && (args.assert_optimality.is_some() || args.assert_feasibility.is_some()) {
        failed.push(format!("{} scenarios failed to recover", report.recovery_failures));
    }
    if !failed.is_empty() {
        bail!("eval: {}", failed.join("; "));
    }
    Ok(())
}
