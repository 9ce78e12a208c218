//! Acceptance checks for the whole pipeline.
//!
//! Prints one `criterion N PASS|FAIL: ...` line per criterion and exits with
//! status 1 when any of them fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 4 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use opf_learn::case_model::load_builtin;
use opf_learn::eval::{draw_test_batch, evaluate_batch, BenchConfig, BenchReport, TestBatch};
use opf_learn::nn::{decode_outputs, train, ModelMeta, TrainConfig, TrainReport};
use opf_learn::sampling::{
    build_covariance, generate_dataset_with_floor, gibbs_sample_loads, CovarianceStyle, ScenarioStream,
};
use opf_learn::{LoadScenario, MlpModel, Network, OpfOptions, OpfSolver, PfOptions, PfSpec, PowerFlow, Recovery, SamplerConfig, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict { pass, detail }
    }
}

fn net(name: &str) -> Network {
    load_builtin(name).unwrap_or_else(|| panic!("builtin {name}"))
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Upper (operational) solution of the two-bus power flow by bisection on
/// the voltage magnitude. Returns `(|V2|, angle V2, slack injection)`.
fn two_bus_oracle(network: &Network, v1: f64, p_load: f64, q_load: f64) -> (f64, f64, Complex64) {
    let br = &network.branches[0];
    assert!(br.tap_ratio == 1.0 && br.phase_shift == 0.0);
    let y = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let shunt = Complex64::new(0.0, br.b_charge / 2.0);
    let (y11, y22, y21) = (y + shunt, y + shunt, -y);
    let s2 = -Complex64::new(p_load, q_load);
    let g = |v: f64| (s2 - v * v * y22.conj()).norm() - v * v1 * y21.norm();
    let step = 1e-2;
    let mut v = 2.0;
    assert!(g(v) > 0.0);
    while g(v - step) > 0.0 {
        v -= step;
        assert!(v > step, "no high-voltage solution");
    }
    let (mut lo, mut hi) = (v - step, v);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let vm = 0.5 * (lo + hi);
    let theta = ((s2 - vm * vm * y22.conj()) / (vm * v1 * y21.conj())).arg();
    let v2 = Complex64::from_polar(vm, theta);
    let v1c = Complex64::new(v1, 0.0);
    let s1 = v1c * (y11 * v1c + y21 * v2).conj();
    (vm, theta, s1)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let network = net("case2");
    let pf = PowerFlow::new(&network);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut loads = vec![(network.buses[1].p_load, network.buses[1].q_load)];
    loads.extend((0..49).map(|_| (rng.gen_range(0.05..1.5), rng.gen_range(-0.3..0.6))));
    let mut worst = 0.0f64;
    for &(p, q) in &loads {
        let mut spec = PfSpec::from_case(&network);
        spec.loads = LoadScenario { p_load: vec![p], q_load: vec![q] };
        let sol = pf.solve(&spec, &PfOptions::default()).expect("power flow converges");
        let (vm, va, _) = two_bus_oracle(&network, network.generators[0].v_set, p, q);
        worst = worst.max((sol.point.voltages.magnitude[1] - vm).abs());
        worst = worst.max((sol.point.voltages.angle[1] - va).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-9 && secs < 1.0,
        format!("{} load levels, max |V|/angle deviation {worst:.2e}, {secs:.3}s", loads.len()),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in ["case2", "case14"] {
        let network = net(name);
        let pf = PowerFlow::new(&network);
        for _ in 0..20 {
            let mut spec = PfSpec::from_case(&network);
            for p in spec.loads.p_load.iter_mut().chain(spec.loads.q_load.iter_mut()) {
                *p *= rng.gen_range(0.5..1.5);
            }
            let system = pf.system(&spec).expect("valid spec");
            let mut state = system.initial_state(None);
            for m in &mut state.magnitude {
                *m = rng.gen_range(0.9..1.1);
            }
            for (i, a) in state.angle.iter_mut().enumerate() {
                if i != network.slack_index {
                    *a = rng.gen_range(-0.3..0.3);
                }
            }
            let jac = system.jacobian_dense(&state);
            let x = system.unknowns(&state);
            let h = 1e-6;
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..x.len() {
                let eval = |dx: f64| {
                    let mut s = state.clone();
                    let mut xk = x.clone();
                    xk[k] += dx;
                    system.set_unknowns(&mut s, &xk);
                    system.mismatch(&s)
                };
                let (fp, fm) = (eval(h), eval(-h));
                for r in 0..x.len() {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    num += (jac[r][k] - fd).powi(2);
                    den += jac[r][k].powi(2);
                }
            }
            worst = worst.max((num / den).sqrt());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-5 && secs < 10.0,
        format!("40 random states on case2 and case14, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

/// Cheapest feasible dispatch of the two-bus system over a fine grid of
/// slack voltages.
fn two_bus_grid_optimum(network: &Network, p: f64, q: f64) -> f64 {
    let (b1, b2, gen) = (&network.buses[0], &network.buses[1], &network.generators[0]);
    let n = 20_000;
    let mut best = f64::INFINITY;
    for k in 0..=n {
        let v1 = b1.v_min + (b1.v_max - b1.v_min) * k as f64 / n as f64;
        let (v2, _, s1) = two_bus_oracle(network, v1, p, q);
        let feasible = v2 >= b2.v_min
            && v2 <= b2.v_max
            && s1.re >= gen.p_min
            && s1.re <= gen.p_max
            && s1.im >= gen.q_min
            && s1.im <= gen.q_max;
        if feasible {
            best = best.min(network.cost(&[s1.re]));
        }
    }
    best
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let network = net("case2");
    let sampler = SamplerConfig::for_network(&network, 3).unwrap();
    let scenarios = ScenarioStream::new(&network, &sampler).unwrap().take(25);
    let solver = OpfSolver::new(&network);
    let mut worst = 0.0f64;
    for loads in &scenarios {
        let sol = solver.solve(loads, 0.0, None, &OpfOptions::default()).expect("OPF converges");
        let oracle = two_bus_grid_optimum(&network, loads.p_load[0], loads.q_load[0]);
        worst = worst.max(rel_diff(sol.objective, oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-4 && secs < 60.0,
        format!("25 sampled scenarios, max relative cost difference {worst:.2e}, {secs:.1}s"),
    )
}

fn criterion_4() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, reference) in [("case57", 41.74e3), ("case39", 41.86e3), ("case118", 129.66e3)] {
        let network = net(name);
        match OpfSolver::new(&network).solve(&LoadScenario::base(&network), 0.0, None, &OpfOptions::default()) {
            Ok(sol) => {
                let d = rel_diff(sol.objective, reference);
                pass &= d < 0.01;
                parts.push(format!("{name} {:.2} $/hr ({:.3}% off)", sol.objective, 100.0 * d));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} failed: {e}"));
            }
        }
    }
    Verdict::new(pass, parts.join(", "))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let network = net("case39");
    let (base, _) = network.base_loads();
    let mu = 0.7;
    let box_ok = |samples: &[Vec<f64>]| {
        samples.iter().all(|s| {
            s.iter().zip(&base).all(|(&x, &p0)| {
                let (lo, hi) = ((1.0 - mu) * p0, (1.0 + mu) * p0);
                x >= lo.min(hi) && x <= lo.max(hi)
            })
        })
    };

    let correlated = SamplerConfig::for_network(&network, 5).unwrap();
    let correlated_samples = gibbs_sample_loads(&base, &correlated, 10_000).unwrap();

    let scale = 0.2;
    let sigma = build_covariance(&network, CovarianceStyle::ScaledIdentity { scale }).unwrap();
    let independent = SamplerConfig::new(mu, sigma, 200, 10, 6).unwrap();
    let samples = gibbs_sample_loads(&base, &independent, 10_000).unwrap();
    let n = samples.len() as f64;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut ks = 0.0f64;
    for (i, &p0) in base.iter().enumerate().filter(|(_, p)| **p != 0.0) {
        let sd = scale * p0.abs();
        let (lo, hi) = (((1.0 - mu) * p0).min((1.0 + mu) * p0), ((1.0 - mu) * p0).max((1.0 + mu) * p0));
        let (fa, fb) = (std_normal.cdf((lo - p0) / sd), std_normal.cdf((hi - p0) / sd));
        let cdf = |x: f64| (std_normal.cdf((x - p0) / sd) - fa) / (fb - fa);
        let mut xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        xs.sort_by(f64::total_cmp);
        for (k, &x) in xs.iter().enumerate() {
            let f = cdf(x);
            ks = ks.max((f - k as f64 / n).abs()).max(((k + 1) as f64 / n - f).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let inside = box_ok(&samples) && box_ok(&correlated_samples);
    Verdict::new(
        inside && ks < 0.02 && secs < 30.0,
        format!("2 x 10^4 samples inside box: {inside}, max KS statistic over {} loads {ks:.4}, {secs:.1}s", base.len()),
    )
}

fn criterion_6() -> Verdict {
    let network = net("case39");
    let widths = MlpModel::architecture(network.n_load(), network.n_gen());
    let plain = MlpModel::new(widths.clone(), ModelMeta { network: "case39".into(), lambda: 0.0, seed: 7 }).unwrap();
    let mut saturated = MlpModel::new(widths, ModelMeta { network: "case39".into(), lambda: 0.0, seed: 8 }).unwrap();
    for w in saturated.params_mut() {
        *w *= 1e3;
    }
    let features = LoadScenario::base(&network).to_features();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0usize;
    let total = 100_000;
    for k in 0..total {
        let x: Vec<f64> = match k % 4 {
            0 => features.iter().map(|&f| f * rng.gen_range(0.0..2.0)).collect(),
            1 => features.iter().map(|_| rng.gen_range(-1.0..1.0) * 1e6).collect(),
            2 => features.iter().map(|&f| f * 1e6 * rng.gen_range(-1.0..1.0)).collect(),
            _ => features.iter().map(|_| if rng.gen::<bool>() { 1e6 } else { -1e6 }).collect(),
        };
        let model = if k % 2 == 0 { &plain } else { &saturated };
        let d = decode_outputs(&model.forward(&x).expect("forward"), &network);
        let bad = network.generators.iter().enumerate().any(|(g, gen)| {
            let bus = &network.buses[gen.bus];
            !(d.p_gen[g] >= gen.p_min && d.p_gen[g] <= gen.p_max && d.v_gen[g] >= bus.v_min && d.v_gen[g] <= bus.v_max)
        });
        violations += bad as usize;
    }
    Verdict::new(violations == 0, format!("{total} inputs (half scaled by 10^6), {violations} decoded bound violations"))
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let shapes: Vec<Vec<usize>> = vec![
        MlpModel::architecture(1, 1),
        MlpModel::architecture(11, 5),
        MlpModel::architecture(21, 10),
        vec![3, 1],
        vec![1, 4, 2],
        vec![5, 7, 3, 6],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for (s, widths) in shapes.iter().enumerate() {
        let (n_in, n_out) = (widths[0], *widths.last().unwrap());
        let mut model = MlpModel::new(widths.clone(), ModelMeta { network: "check".into(), lambda: 0.0, seed: s as u64 }).unwrap();
        for w in model.params_mut() {
            *w += rng.gen_range(-0.5..0.5);
        }
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| {
                ((0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect(), (0..n_out).map(|_| rng.gen_range(0.0..1.0)).collect())
            })
            .collect();
        let batch: Vec<(&[f64], &[f64])> = data.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let (_, grad) = model.loss_and_gradient(&batch).unwrap();
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for (k, &g) in grad.iter().enumerate() {
            let orig = model.params()[k];
            model.params_mut()[k] = orig + h;
            let up = model.loss(&batch).unwrap();
            model.params_mut()[k] = orig - h;
            let down = model.loss(&batch).unwrap();
            model.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            num += (g - fd).powi(2);
            den += g * g;
        }
        worst = worst.max((num / den).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-4 && secs < 10.0,
        format!("{} layer shapes, max relative gradient error {worst:.2e}, {secs:.2}s", shapes.len()),
    )
}

const LAMBDAS: [f64; 2] = [0.005, 0.01];
const DATASET_SIZE: usize = 22_223;
const EPOCHS: usize = 1000;
const TEST_SCENARIOS: usize = 1000;
const FEASIBLE_FLOOR: f64 = 0.05;
const EXTENDED_ROUNDS: usize = 10;

struct Run {
    lambda: f64,
    model: MlpModel,
    training: TrainReport,
    attempted: usize,
    batch: TestBatch,
    report: BenchReport,
    extended: BenchReport,
    seconds: f64,
}

struct Fixture {
    network: Network,
    runs: Vec<Run>,
}

fn bench_config(network: &Network, seed: u64, clamp_rounds: usize) -> BenchConfig {
    let sampler = SamplerConfig::for_network(network, seed).unwrap();
    BenchConfig {
        sequential: true,
        min_feasible_rate: FEASIBLE_FLOOR,
        clamp_rounds,
        ..BenchConfig::new(TEST_SCENARIOS, seed, sampler)
    }
}

fn build_run(network: &Network, lambda: f64) -> Result<Run, String> {
    let start = Instant::now();
    let sampler = SamplerConfig::for_network(network, 1).unwrap();
    eprintln!("acceptance: generating {DATASET_SIZE} case39 samples at lambda {lambda}");
    let dataset = generate_dataset_with_floor(network, &sampler, lambda, DATASET_SIZE, FEASIBLE_FLOOR)
        .map_err(|e| format!("dataset at lambda {lambda}: {e}"))?;
    eprintln!("acceptance: training lambda {lambda} model for {EPOCHS} epochs");
    let config = TrainConfig { epochs: EPOCHS, seed: 2, ..TrainConfig::default() };
    let meta = ModelMeta { network: network.name.clone(), lambda, seed: 2 };
    let (model, training) = train(&dataset.samples, &config, meta).map_err(|e| format!("training: {e}"))?;
    eprintln!("acceptance: evaluating lambda {lambda} model on {TEST_SCENARIOS} test scenarios");
    let config = bench_config(network, 777, 1);
    let batch = draw_test_batch(network, &config.sampler, TEST_SCENARIOS, lambda, true, FEASIBLE_FLOOR)
        .map_err(|e| format!("test batch: {e}"))?;
    let (outcomes, failures) = evaluate_batch(network, &model, &batch, &config);
    let report = BenchReport::from_outcomes(network, &model, &config, &batch, outcomes, failures);
    let seconds = start.elapsed().as_secs_f64();
    let extended_config = bench_config(network, 777, EXTENDED_ROUNDS);
    let (outcomes, failures) = evaluate_batch(network, &model, &batch, &extended_config);
    let extended = BenchReport::from_outcomes(network, &model, &extended_config, &batch, outcomes, failures);
    Ok(Run { lambda, model, training, attempted: dataset.attempted, batch, report, extended, seconds })
}

fn fixture() -> &'static Result<Fixture, String> {
    static FIXTURE: OnceLock<Result<Fixture, String>> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let network = net("case39");
        let runs = LAMBDAS.iter().map(|&l| build_run(&network, l)).collect::<Result<Vec<_>, _>>()?;
        Ok(Fixture { network, runs })
    })
}

fn criterion_8() -> Verdict {
    let fx = match fixture() {
        Ok(fx) => fx,
        Err(e) => return Verdict::new(false, e.clone()),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for run in &fx.runs {
        let r = &run.report;
        let ok = r.t == TEST_SCENARIOS
            && run.training.n_train >= 20_000
            && r.optimality < 1e-2
            && r.feasibility < 1e-6
            && r.sf > 3.0
            && r.q_violations_after_recovery == 0;
        pass &= ok;
        parts.push(format!(
            "lambda {}: {} training samples ({} draws), T={}, optimality {:.3e}, max |h| {:.2e}, SF {:.2}, Q violations {} \
             ({} direct, {} clamped, {} recovery failures; with {EXTENDED_ROUNDS} clamp rounds: {} Q violations, {} failures)",
            run.lambda,
            run.training.n_train,
            run.attempted,
            r.t,
            r.optimality,
            r.feasibility,
            r.sf,
            r.q_violations_after_recovery,
            r.direct_count,
            r.clamped_count,
            r.recovery_failures,
            run.extended.q_violations_after_recovery,
            run.extended.recovery_failures,
        ));
    }
    let total: f64 = fx.runs.iter().map(|r| r.seconds).sum();
    pass &= total <= 7200.0;
    parts.push(format!("{:.0}s in total", total));
    Verdict::new(pass, parts.join("; "))
}

fn criterion_9() -> Verdict {
    let fx = match fixture() {
        Ok(fx) => fx,
        Err(e) => return Verdict::new(false, e.clone()),
    };
    let margin = LAMBDAS.iter().cloned().fold(0.0, f64::max);
    let config = BenchConfig { scenarios: 100, ..bench_config(&fx.network, 4242, 1) };
    let batch = match draw_test_batch(&fx.network, &config.sampler, 100, margin, true, FEASIBLE_FLOOR) {
        Ok(b) => b,
        Err(e) => return Verdict::new(false, format!("test batch: {e}")),
    };
    let reports: Vec<BenchReport> = fx
        .runs
        .iter()
        .map(|run| {
            let (outcomes, failures) = evaluate_batch(&fx.network, &run.model, &batch, &config);
            BenchReport::from_outcomes(&fx.network, &run.model, &config, &batch, outcomes, failures)
        })
        .collect();
    let (small, large) = (&reports[0], &reports[1]);
    let same_size = small.t == 100 && large.t == 100;
    Verdict::new(
        same_size && large.optimality >= small.optimality && large.delta_q <= small.delta_q,
        format!(
            "100 shared scenarios: optimality {:.3e} (lambda {}) vs {:.3e} (lambda {}), delta_q {:.4} vs {:.4} MVAr",
            small.optimality, LAMBDAS[0], large.optimality, LAMBDAS[1], small.delta_q, large.delta_q
        ),
    )
}

fn criterion_10() -> Verdict {
    let fx = match fixture() {
        Ok(fx) => fx,
        Err(e) => return Verdict::new(false, e.clone()),
    };
    let network = &fx.network;
    let dispatchable = network.dispatchable_generators();
    let (mut direct, mut clamped, mut clamps, mut off_bound, mut drifted, mut failed) = (0, 0, 0, 0, 0, 0);
    for run in &fx.runs {
        let recovery = Recovery::new(network, &run.model);
        for scenario in &run.batch.scenarios {
            let Ok(r) = recovery.recover(&scenario.loads) else {
                failed += 1;
                continue;
            };
            match r.stage {
                Stage::DirectPF => direct += 1,
                Stage::ClampedPF => clamped += 1,
            }
            for c in &r.clamps {
                clamps += 1;
                let gen = &network.generators[c.generator];
                let bound = if c.q_free > gen.q_max { gen.q_max } else { gen.q_min };
                let exact = c.q_clamped.to_bits() == bound.to_bits()
                    && r.point.q_gen[c.generator].to_bits() == bound.to_bits();
                off_bound += !exact as usize;
            }
            drifted += dispatchable.iter().filter(|&&g| r.point.p_gen[g].to_bits() != r.decoded.p_gen[g].to_bits()).count();
        }
    }
    Verdict::new(
        direct > 0 && clamped > 0 && off_bound == 0 && drifted == 0,
        format!(
            "{direct} DirectPF, {clamped} ClampedPF, {failed} failed; {off_bound} of {clamps} clamps off their bound, \
             {drifted} dispatch set-points changed"
        ),
    )
}

fn main() {
    let criteria: [fn() -> Verdict; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (k, check) in criteria.iter().enumerate() {
        let n = k + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        failed += !verdict.pass as usize;
        println!("criterion {n} {}: {}", if verdict.pass { "PASS" } else { "FAIL" }, verdict.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
