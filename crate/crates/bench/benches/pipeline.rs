use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use opf_learn::case_model::load_builtin;
use opf_learn::nn::ModelMeta;
use opf_learn::{LoadScenario, MlpModel, OpfOptions, OpfSolver, PfOptions, PfSpec, PowerFlow, Recovery};

const CASES: [&str; 3] = ["case14", "case39", "case118"];

fn untrained_model(name: &str, n_load: usize, n_gen: usize) -> MlpModel {
    let meta = ModelMeta { network: name.to_string(), lambda: 0.005, seed: 7 };
    MlpModel::new(MlpModel::architecture(n_load, n_gen), meta).unwrap()
}

fn power_flow(c: &mut Criterion) {
    let mut group = c.benchmark_group("power_flow");
    for name in CASES {
        let net = load_builtin(name).unwrap();
        let pf = PowerFlow::new(&net);
        let spec = PfSpec::from_case(&net);
        let options = PfOptions::default();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pf.solve(black_box(&spec), &options).unwrap())
        });
    }
    group.finish();
}

fn optimal_power_flow(c: &mut Criterion) {
    let mut group = c.benchmark_group("opf");
    group.sample_size(10);
    for name in CASES {
        let net = load_builtin(name).unwrap();
        let solver = OpfSolver::new(&net);
        let loads = LoadScenario::base(&net);
        let options = OpfOptions::default();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solver.solve(black_box(&loads), 0.0, None, &options).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for name in CASES {
        let net = load_builtin(name).unwrap();
        let model = untrained_model(name, net.n_load(), net.n_gen());
        let x = LoadScenario::base(&net).to_features();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

fn recovery(c: &mut Criterion) {
    let mut group = c.benchmark_group("recovery");
    for name in CASES {
        let net = load_builtin(name).unwrap();
        let model = untrained_model(name, net.n_load(), net.n_gen());
        let loads = LoadScenario::base(&net);
        let recovery = Recovery::new(&net, &model);
        if recovery.recover(&loads).is_err() {
            continue;
        }
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| recovery.recover(black_box(&loads)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, power_flow, optimal_power_flow, forward, recovery);
criterion_main!(benches);
