//! Benchmark metrics comparing the learned pipeline with the OPF baseline.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acopf::{OpfOptions, OpfSolver};
use crate::case_model::Network;
use crate::nn::MlpModel;
use crate::recovery::{q_excess, q_violations, Recovery, Stage};
use crate::sampling::{LoadScenario, SamplerConfig, SamplingError, ScenarioStream, MIN_FEASIBLE_RATE, PROBE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub id: u64,
    /// Seconds for model evaluation plus power flows.
    pub tau_o: f64,
    pub tau_nn: f64,
    pub tau_pf1: f64,
    pub tau_pf2: f64,
    /// Seconds for the baseline OPF solve.
    pub tau_opf: f64,
    /// $/hr at the recovered point.
    pub cost_learned: f64,
    /// $/hr of the unrestricted OPF.
    pub cost_optimal: f64,
    /// Reactive-limit excess of every generator after the first power flow,
    /// in MVAr.
    pub xi_q: Vec<f64>,
    pub h_norm: f64,
    pub stage: Stage,
    /// Generators outside their reactive limits at the recovered point.
    pub q_violations_after: usize,
}

impl ScenarioOutcome {
    pub fn speedup(&self) -> f64 {
        self.tau_opf / self.tau_o
    }

    pub fn gap(&self) -> f64 {
        (self.cost_learned - self.cost_optimal) / self.cost_optimal
    }
}

/// Mean of the per-scenario time ratios.
pub fn speedup_factor(outcomes: &[ScenarioOutcome]) -> f64 {
    mean(outcomes.iter().map(ScenarioOutcome::speedup))
}

/// Mean over scenarios of `||xi||_2 / n_gen`, in MVAr.
pub fn delta_q(outcomes: &[ScenarioOutcome], n_gen: usize) -> f64 {
    mean(outcomes.iter().map(|o| o.xi_q.iter().map(|x| x * x).sum::<f64>().sqrt() / n_gen as f64))
}

/// Mean relative cost excess over the optimal cost.
pub fn optimality_gap(outcomes: &[ScenarioOutcome]) -> f64 {
    mean(outcomes.iter().map(ScenarioOutcome::gap))
}

/// Largest power-balance residual norm.
pub fn max_infeasibility(outcomes: &[ScenarioOutcome]) -> f64 {
    outcomes.iter().map(|o| o.h_norm).fold(0.0, f64::max)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub scenarios: usize,
    /// Test scenarios are drawn with this seed in place of the sampler's.
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Run scenarios one after another for timing-grade measurements.
    pub sequential: bool,
    /// Smallest acceptable fraction of accepted draws.
    pub min_feasible_rate: f64,
    /// Clamp-and-resolve rounds of the recovery; see [`Recovery::clamp_rounds`].
    pub clamp_rounds: usize,
}

impl BenchConfig {
    /// `scenarios` test scenarios drawn with `seed`, evaluated in parallel
    /// with the default recovery.
    pub fn new(scenarios: usize, seed: u64, sampler: SamplerConfig) -> Self {
        BenchConfig { scenarios, seed, sampler, sequential: false, min_feasible_rate: MIN_FEASIBLE_RATE, clamp_rounds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub network: String,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub scenarios_requested: usize,
    /// Number of scenarios evaluated.
    pub t: usize,
    pub sf: f64,
    pub delta_q: f64,
    pub optimality: f64,
    pub feasibility: f64,
    pub q_violations_after_recovery: usize,
    pub direct_count: usize,
    pub clamped_count: usize,
    /// Draws discarded because the unrestricted OPF did not converge.
    pub baseline_failures: usize,
    /// Draws discarded because the restricted OPF at the model's voltage
    /// margin did not converge.
    pub restricted_infeasible: usize,
    pub recovery_failures: usize,
    pub n_gen: usize,
    pub per_scenario: Vec<ScenarioOutcome>,
}

impl BenchReport {
    /// Aggregates `outcomes` into a report.
    pub fn from_outcomes(
        network: &Network,
        model: &MlpModel,
        config: &BenchConfig,
        batch: &TestBatch,
        outcomes: Vec<ScenarioOutcome>,
        recovery_failures: usize,
    ) -> Self {
        let n_gen = network.n_gen();
        BenchReport {
            network: network.name.clone(),
            lambda: model.meta.lambda,
            mu: config.sampler.mu(),
            seed: config.seed,
            scenarios_requested: config.scenarios,
            t: outcomes.len(),
            sf: speedup_factor(&outcomes),
            delta_q: delta_q(&outcomes, n_gen),
            optimality: optimality_gap(&outcomes),
            feasibility: max_infeasibility(&outcomes),
            q_violations_after_recovery: outcomes.iter().map(|o| o.q_violations_after).sum(),
            direct_count: outcomes.iter().filter(|o| o.stage == Stage::DirectPF).count(),
            clamped_count: outcomes.iter().filter(|o| o.stage == Stage::ClampedPF).count(),
            baseline_failures: batch.baseline_failures,
            restricted_infeasible: batch.restricted_infeasible,
            recovery_failures,
            n_gen,
            per_scenario: outcomes,
        }
    }

    pub fn write_json<W: Write>(&self, writer: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(writer, self)
    }

    pub fn write_scenarios_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "id", "stage", "tau_o", "tau_nn", "tau_pf1", "tau_pf2", "tau_opf", "speedup", "cost_learned",
            "cost_optimal", "gap", "xi_q_norm", "h_norm", "q_violations_after",
        ])?;
        for o in &self.per_scenario {
            let xi = o.xi_q.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.write_record([
                o.id.to_string(),
                format!("{:?}", o.stage),
                o.tau_o.to_string(),
                o.tau_nn.to_string(),
                o.tau_pf1.to_string(),
                o.tau_pf2.to_string(),
                o.tau_opf.to_string(),
                o.speedup().to_string(),
                o.cost_learned.to_string(),
                o.cost_optimal.to_string(),
                o.gap().to_string(),
                xi.to_string(),
                o.h_norm.to_string(),
                o.q_violations_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Speed-up histogram with `bins` equal-width bins, split by stage.
    pub fn speedup_histogram(&self, bins: usize) -> Vec<HistogramBin> {
        let ratios: Vec<(f64, Stage)> = self.per_scenario.iter().map(|o| (o.speedup(), o.stage)).collect();
        if ratios.is_empty() || bins == 0 {
            return Vec::new();
        }
        let lo = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut out: Vec<HistogramBin> = (0..bins)
            .map(|k| HistogramBin { lower: lo + k as f64 * width, upper: lo + (k + 1) as f64 * width, direct: 0, clamped: 0 })
            .collect();
        for (r, stage) in ratios {
            let k = (((r - lo) / width) as usize).min(bins - 1);
            match stage {
                Stage::DirectPF => out[k].direct += 1,
                Stage::ClampedPF => out[k].clamped += 1,
            }
        }
        out
    }

    pub fn write_histogram_csv<W: Write>(&self, writer: W, bins: usize) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lower", "upper", "count", "direct", "clamped"])?;
        for b in self.speedup_histogram(bins) {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                (b.direct + b.clamped).to_string(),
                b.direct.to_string(),
                b.clamped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub direct: usize,
    pub clamped: usize,
}

/// A test scenario with its unrestricted OPF solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScenario {
    pub id: u64,
    pub loads: LoadScenario,
    pub objective: f64,
    /// Seconds spent in the OPF solve.
    pub tau_opf: f64,
}

/// Test scenarios drawn like training samples, plus the draws discarded
/// along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBatch {
    pub scenarios: Vec<BaselineScenario>,
    /// Draws whose unrestricted OPF did not converge.
    pub baseline_failures: usize,
    /// Draws whose restricted OPF at the filter margin did not converge.
    pub restricted_infeasible: usize,
}

const CHUNK: usize = 64;

/// Draws scenarios from `sampler` until `count` of them have a converged
/// unrestricted OPF and a converged restricted OPF with voltage margin
/// `margin`, the condition under which a draw enters a training set. Ids
/// count every draw. Fails with [`SamplingError::LowFeasibility`] when fewer
/// than `min_rate` of at least [`PROBE_SIZE`] draws are accepted.
pub fn draw_test_batch(
    network: &Network,
    sampler: &SamplerConfig,
    count: usize,
    margin: f64,
    sequential: bool,
    min_rate: f64,
) -> Result<TestBatch, SamplingError> {
    enum Draw {
        Accepted(BaselineScenario),
        BaselineFailed,
        RestrictedInfeasible,
    }
    let solver = OpfSolver::new(network);
    let options = OpfOptions::default();
    let mut stream = ScenarioStream::new(network, sampler)?;
    let mut batch = TestBatch { scenarios: Vec::with_capacity(count), baseline_failures: 0, restricted_infeasible: 0 };
    let mut attempted = 0usize;
    while batch.scenarios.len() < count {
        let need = count - batch.scenarios.len();
        let chunk: Vec<(u64, LoadScenario)> =
            (0..need.min(CHUNK)).map(|k| ((attempted + k) as u64, stream.next_scenario())).collect();
        let solve = |(id, loads): &(u64, LoadScenario)| -> Draw {
            let start = Instant::now();
            let sol = solver.solve(loads, 0.0, None, &options);
            let tau_opf = start.elapsed().as_secs_f64();
            let Ok(sol) = sol else { return Draw::BaselineFailed };
            if margin > 0.0 && solver.solve(loads, margin, None, &options).is_err() {
                return Draw::RestrictedInfeasible;
            }
            Draw::Accepted(BaselineScenario { id: *id, loads: loads.clone(), objective: sol.objective, tau_opf })
        };
        let draws: Vec<Draw> = if sequential { chunk.iter().map(solve).collect() } else { chunk.par_iter().map(solve).collect() };
        for draw in draws {
            if batch.scenarios.len() == count {
                break;
            }
            attempted += 1;
            match draw {
                Draw::Accepted(b) => batch.scenarios.push(b),
                Draw::BaselineFailed => batch.baseline_failures += 1,
                Draw::RestrictedInfeasible => batch.restricted_infeasible += 1,
            }
        }
        if attempted >= PROBE_SIZE && (batch.scenarios.len() as f64) < min_rate * attempted as f64 {
            return Err(SamplingError::LowFeasibility { accepted: batch.scenarios.len(), attempted });
        }
    }
    Ok(batch)
}

/// Runs the recovery pipeline on every scenario of `batch`. Returns the
/// outcomes and the number of scenarios whose recovery failed.
pub fn evaluate_batch(network: &Network, model: &MlpModel, batch: &TestBatch, config: &BenchConfig) -> (Vec<ScenarioOutcome>, usize) {
    let recovery = Recovery::new(network, model).with_clamp_rounds(config.clamp_rounds);
    let base = network.base_mva;
    let run = |b: &BaselineScenario| -> Option<ScenarioOutcome> {
        let start = Instant::now();
        let result = recovery.recover(&b.loads);
        let tau_o = start.elapsed().as_secs_f64();
        let result = result.ok()?;
        Some(ScenarioOutcome {
            id: b.id,
            tau_o,
            tau_nn: result.timings.nn,
            tau_pf1: result.timings.pf1,
            tau_pf2: result.timings.pf2,
            tau_opf: b.tau_opf,
            cost_learned: network.cost(&result.point.p_gen),
            cost_optimal: b.objective,
            xi_q: q_excess(network, &result.q_free).iter().map(|x| x * base).collect(),
            h_norm: result.residual_norm,
            stage: result.stage,
            q_violations_after: q_violations(network, &result.point.q_gen).len(),
        })
    };
    let evaluated: Vec<Option<ScenarioOutcome>> =
        if config.sequential { batch.scenarios.iter().map(run).collect() } else { batch.scenarios.par_iter().map(run).collect() };
    let failures = evaluated.iter().filter(|o| o.is_none()).count();
    (evaluated.into_iter().flatten().collect(), failures)
}

/// Draws `config.scenarios` test scenarios from the model's training
/// distribution and benchmarks the model on them.
pub fn run_benchmark(network: &Network, model: &MlpModel, config: &BenchConfig) -> Result<BenchReport, SamplingError> {
    let sampler = config.sampler.clone().with_seed(config.seed);
    let batch = draw_test_batch(network, &sampler, config.scenarios, model.meta.lambda, config.sequential, config.min_feasible_rate)?;
    let (outcomes, recovery_failures) = evaluate_batch(network, model, &batch, config);
    Ok(BenchReport::from_outcomes(network, model, config, &batch, outcomes, recovery_failures))
}
