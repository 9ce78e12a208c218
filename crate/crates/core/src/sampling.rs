//! Correlated load scenarios and labelled training data.
//!
//! Active demand follows a multivariate normal truncated to a box of
//! `±mu` around the base profile, sampled coordinate-wise with a Gibbs
//! chain. Reactive demand comes from independent uniform power factors.
//! Each scenario is labelled with a restricted OPF solution; scenarios the
//! restricted problem cannot serve are discarded and replaced.

use std::io::{Read, Write};

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use thiserror::Error;

use crate::acopf::{OpfOptions, OpfSolver};
use crate::case_model::Network;
use crate::nn::{encode_targets, SetpointVector};

/// Active and reactive demand at every load bus of a network, in the order
/// of [`Network::load_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadScenario {
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

impl LoadScenario {
    pub fn base(network: &Network) -> Self {
        let (p_load, q_load) = network.base_loads();
        LoadScenario { p_load, q_load }
    }

    /// Demand expanded to full per-bus vectors.
    pub fn bus_vectors(&self, network: &Network) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; network.n_bus()];
        let mut q = vec![0.0; network.n_bus()];
        for (k, &bus) in network.load_set.iter().enumerate() {
            p[bus] = self.p_load[k];
            q[bus] = self.q_load[k];
        }
        (p, q)
    }

    /// Model input `p_load ++ q_load`.
    pub fn to_features(&self) -> Vec<f64> {
        self.p_load.iter().chain(&self.q_load).copied().collect()
    }

    pub fn from_features(x: &[f64]) -> Self {
        let n = x.len() / 2;
        LoadScenario { p_load: x[..n].to_vec(), q_load: x[n..2 * n].to_vec() }
    }
}

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("deviation fraction must lie in (0, 1), got {0}")]
    Deviation(f64),
    #[error("covariance matrix is {rows}x{cols}, expected {expected}x{expected}")]
    CovarianceShape { rows: usize, cols: usize, expected: usize },
    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("distance-decay factor must lie in [0, 1), got {0}")]
    DecayFactor(f64),
    #[error("thinning must be at least 1")]
    Thinning,
    #[error("base load vector has {got} entries, covariance has {expected}")]
    BaseLength { got: usize, expected: usize },
    #[error("only {accepted} of {attempted} scenarios were feasible; check the voltage margin and deviation fraction")]
    LowFeasibility { accepted: usize, attempted: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Settings of the truncated-Gaussian load model and its Gibbs chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    mu: f64,
    sigma: Vec<Vec<f64>>,
    precision: Vec<Vec<f64>>,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Validates the covariance (symmetric positive definite) and caches
    /// its inverse for the conditional draws.
    pub fn new(
        mu: f64,
        sigma: Vec<Vec<f64>>,
        burn_in: usize,
        thinning: usize,
        seed: u64,
    ) -> Result<Self, SamplingError> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(SamplingError::Deviation(mu));
        }
        if thinning == 0 {
            return Err(SamplingError::Thinning);
        }
        let n = sigma.len();
        if let Some(row) = sigma.iter().find(|r| r.len() != n) {
            return Err(SamplingError::CovarianceShape { rows: n, cols: row.len(), expected: n });
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (sigma[i][j], sigma[j][i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(SamplingError::NotPositiveDefinite);
                }
            }
        }
        let m = Mat::<f64>::from_fn(n, n, |i, j| sigma[i][j]);
        if sigma.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SamplingError::NotPositiveDefinite);
        }
        let llt = m.llt(Side::Lower).map_err(|_| SamplingError::NotPositiveDefinite)?;
        let inv = llt.inverse();
        let precision = (0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect();
        Ok(SamplerConfig { mu, sigma, precision, burn_in, thinning, seed })
    }

    /// Defaults for a network: distance-decay covariance, `mu = 0.7`,
    /// 200 burn-in sweeps and thinning 10.
    pub fn for_network(network: &Network, seed: u64) -> Result<Self, SamplingError> {
        let sigma = build_covariance(network, CovarianceStyle::default())?;
        SamplerConfig::new(0.7, sigma, 200, 10, seed)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> &[Vec<f64>] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self, SamplingError> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(SamplingError::Deviation(mu));
        }
        self.mu = mu;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovarianceStyle {
    /// `sigma_i = scale * p_base[i]`, no correlation.
    ScaledIdentity { scale: f64 },
    /// `Sigma_ij = sigma_i sigma_j rho^d(i, j)` with `d` the hop distance
    /// between the load buses.
    DistanceDecay { scale: f64, rho: f64 },
}

impl Default for CovarianceStyle {
    fn default() -> Self {
        CovarianceStyle::DistanceDecay { scale: 0.2, rho: 0.5 }
    }
}

/// Covariance of active demand over the load set. Loads with zero base
/// demand get a unit-scale variance; they are held at zero by the sampler.
pub fn build_covariance(network: &Network, style: CovarianceStyle) -> Result<Vec<Vec<f64>>, SamplingError> {
    let (base, _) = network.base_loads();
    let std_dev = |scale: f64| -> Vec<f64> {
        base.iter().map(|&p| if p != 0.0 { scale * p.abs() } else { scale }).collect()
    };
    let n = base.len();
    match style {
        CovarianceStyle::ScaledIdentity { scale } => {
            let s = std_dev(scale);
            Ok((0..n).map(|i| (0..n).map(|j| if i == j { s[i] * s[i] } else { 0.0 }).collect()).collect())
        }
        CovarianceStyle::DistanceDecay { scale, rho } => {
            if !(0.0..1.0).contains(&rho) {
                return Err(SamplingError::DecayFactor(rho));
            }
            let s = std_dev(scale);
            let mut sigma = vec![vec![0.0; n]; n];
            for (a, &bus_a) in network.load_set.iter().enumerate() {
                let dist = network.hop_distances(bus_a);
                for (b, &bus_b) in network.load_set.iter().enumerate() {
                    let d = dist[bus_b];
                    let corr = if d == usize::MAX { 0.0 } else { rho.powi(d as i32) };
                    sigma[a][b] = s[a] * s[b] * corr;
                }
            }
            Ok(sigma)
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draws from a standard normal truncated to `[a, b]` by inverting the CDF at
/// `u` in `[0, 1)`. Upper-tail intervals are reflected so that the lower end
/// always carries the accurate tail probability.
pub fn truncated_std_normal(a: f64, b: f64, u: f64) -> f64 {
    if a > 0.0 {
        return -truncated_std_normal(-b, -a, 1.0 - u);
    }
    let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
    let x = if fb - fa > 0.0 {
        std_normal_quantile(fa + u * (fb - fa))
    } else {
        a + u * (b - a)
    };
    x.clamp(a, b)
}

/// CDF of `N(mean, sd^2)` truncated to `[lo, hi]`.
pub fn truncated_normal_cdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if x <= lo {
        return 0.0;
    }
    if x >= hi {
        return 1.0;
    }
    let (a, b, z) = ((lo - mean) / sd, (hi - mean) / sd, (x - mean) / sd);
    if a > 0.0 {
        let tail = |t: f64| std_normal_cdf(-t);
        return (tail(a) - tail(z)) / (tail(a) - tail(b));
    }
    (std_normal_cdf(z) - std_normal_cdf(a)) / (std_normal_cdf(b) - std_normal_cdf(a))
}

/// A running Gibbs chain over the truncation box.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    base: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    precision: Vec<Vec<f64>>,
    state: Vec<f64>,
    thinning: usize,
    rng: ChaCha8Rng,
}

impl GibbsChain {
    /// Starts the chain at the base profile and runs the burn-in sweeps.
    pub fn new(base: &[f64], config: &SamplerConfig, rng: ChaCha8Rng) -> Result<Self, SamplingError> {
        if base.len() != config.dim() {
            return Err(SamplingError::BaseLength { got: base.len(), expected: config.dim() });
        }
        let lo = base.iter().map(|&p| ((1.0 - config.mu) * p).min((1.0 + config.mu) * p)).collect();
        let hi = base.iter().map(|&p| ((1.0 - config.mu) * p).max((1.0 + config.mu) * p)).collect();
        let mut chain = GibbsChain {
            base: base.to_vec(),
            lo,
            hi,
            precision: config.precision.clone(),
            state: base.to_vec(),
            thinning: config.thinning,
            rng,
        };
        for _ in 0..config.burn_in {
            chain.sweep();
        }
        Ok(chain)
    }

    fn sweep(&mut self) {
        let n = self.state.len();
        for i in 0..n {
            if self.base[i] == 0.0 {
                continue;
            }
            let q = &self.precision[i];
            let mut shift = 0.0;
            for j in 0..n {
                if j != i {
                    shift += q[j] * (self.state[j] - self.base[j]);
                }
            }
            let mean = self.base[i] - shift / q[i];
            let sd = 1.0 / q[i].sqrt();
            let u: f64 = self.rng.gen();
            let z = truncated_std_normal((self.lo[i] - mean) / sd, (self.hi[i] - mean) / sd, u);
            self.state[i] = (mean + sd * z).clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Advances `thinning` sweeps and returns the state.
    pub fn next_sample(&mut self) -> Vec<f64> {
        for _ in 0..self.thinning {
            self.sweep();
        }
        self.state.clone()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// `count` active-load vectors from the truncated Gaussian around `base`.
pub fn gibbs_sample_loads(base: &[f64], config: &SamplerConfig, count: usize) -> Result<Vec<Vec<f64>>, SamplingError> {
    let mut chain = GibbsChain::new(base, config, ChaCha8Rng::seed_from_u64(config.seed))?;
    Ok((0..count).map(|_| chain.next_sample()).collect())
}

/// Reactive demand from independent power factors drawn from `U[0.8, 1]`.
pub fn assign_power_factors<R: Rng + ?Sized>(p_loads: &[f64], rng: &mut R) -> Vec<f64> {
    p_loads
        .iter()
        .map(|&p| {
            let pf: f64 = rng.gen_range(0.8..=1.0);
            reactive_from_power_factor(p, pf)
        })
        .collect()
}

/// `p * tan(arccos(pf))`.
pub fn reactive_from_power_factor(p: f64, pf: f64) -> f64 {
    p * (1.0 - pf * pf).max(0.0).sqrt() / pf
}

/// An endless, seeded sequence of load scenarios.
#[derive(Debug, Clone)]
pub struct ScenarioStream {
    chain: GibbsChain,
}

impl ScenarioStream {
    pub fn new(network: &Network, config: &SamplerConfig) -> Result<Self, SamplingError> {
        let (base, _) = network.base_loads();
        let chain = GibbsChain::new(&base, config, ChaCha8Rng::seed_from_u64(config.seed))?;
        Ok(ScenarioStream { chain })
    }

    pub fn next_scenario(&mut self) -> LoadScenario {
        let p_load = self.chain.next_sample();
        let q_load = assign_power_factors(&p_load, self.chain.rng());
        LoadScenario { p_load, q_load }
    }

    pub fn take(&mut self, count: usize) -> Vec<LoadScenario> {
        (0..count).map(|_| self.next_scenario()).collect()
    }
}

/// One labelled example: load features and encoded restricted-OPF set-points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: SetpointVector,
    /// $/hr of the restricted OPF solution.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub attempted: usize,
    pub discarded: usize,
}

/// Draws made before the feasible fraction is checked.
pub const PROBE_SIZE: usize = 1000;
/// Default smallest acceptable feasible fraction of draws.
pub const MIN_FEASIBLE_RATE: f64 = 0.1;
const SOLVE_CHUNK: usize = 64;

/// Draws scenarios until `count` of them admit a converged restricted OPF
/// with voltage margin `lambda`, then shuffles the samples with the
/// configured seed. Scenario ids count every draw, discarded or not.
pub fn generate_dataset(
    network: &Network,
    config: &SamplerConfig,
    lambda: f64,
    count: usize,
) -> Result<Dataset, SamplingError> {
    generate_dataset_with_floor(network, config, lambda, count, MIN_FEASIBLE_RATE)
}

/// [`generate_dataset`] with a custom smallest feasible fraction. Generation
/// stops with [`SamplingError::LowFeasibility`] once at least [`PROBE_SIZE`]
/// draws have been made and fewer than `min_rate` of them were feasible.
pub fn generate_dataset_with_floor(
    network: &Network,
    config: &SamplerConfig,
    lambda: f64,
    count: usize,
    min_rate: f64,
) -> Result<Dataset, SamplingError> {
    let mut samples = Vec::with_capacity(count);
    let mut attempted = 0usize;
    if count > 0 {
        let mut stream = ScenarioStream::new(network, config)?;
        let solver = OpfSolver::new(network);
        let options = OpfOptions::default();
        while samples.len() < count {
            let need = count - samples.len();
            let chunk: Vec<(u64, LoadScenario)> = (0..need.clamp(1, SOLVE_CHUNK))
                .map(|k| ((attempted + k) as u64, stream.next_scenario()))
                .collect();
            attempted += chunk.len();
            let labelled: Vec<Option<TrainingSample>> = chunk
                .par_iter()
                .map(|(id, loads)| {
                    let sol = solver.solve(loads, lambda, None, &options).ok()?;
                    Some(TrainingSample {
                        id: *id,
                        x: loads.to_features(),
                        y: encode_targets(&sol.point, network),
                        objective: sol.objective,
                    })
                })
                .collect();
            samples.extend(labelled.into_iter().flatten().take(need));
            if attempted >= PROBE_SIZE && (samples.len() as f64) < min_rate * attempted as f64 {
                return Err(SamplingError::LowFeasibility { accepted: samples.len(), attempted });
            }
        }
    }
    let discarded = attempted - samples.len();
    if discarded > 0 {
        warn!("{}: discarded {discarded} of {attempted} scenarios as infeasible at lambda {lambda}", network.name);
    }
    info!("{}: generated {} samples", network.name, samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    samples.shuffle(&mut rng);
    Ok(Dataset { samples, attempted, discarded })
}

/// Writes a dataset as CSV: `id`, the inputs, the targets, `objective`.
pub fn write_dataset<W: Write>(writer: W, n_load: usize, n_gen: usize, samples: &[TrainingSample]) -> Result<(), SamplingError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((0..n_load).map(|k| format!("p{k}")));
    header.extend((0..n_load).map(|k| format!("q{k}")));
    header.extend((0..n_gen.saturating_sub(1)).map(|k| format!("alpha{k}")));
    header.extend((0..n_gen).map(|k| format!("beta{k}")));
    header.push("objective".into());
    w.write_record(&header)?;
    for s in samples {
        if s.x.len() != 2 * n_load || s.y.alpha.len() + 1 != n_gen || s.y.beta.len() != n_gen {
            return Err(SamplingError::Format(format!("sample {} does not match the dataset dimensions", s.id)));
        }
        let mut row = vec![s.id.to_string()];
        row.extend(s.x.iter().chain(&s.y.alpha).chain(&s.y.beta).map(|v| v.to_string()));
        row.push(s.objective.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; dimensions come from the
/// header. Returns `(n_load, n_gen, samples)`.
pub fn read_dataset<R: Read>(reader: R) -> Result<(usize, usize, Vec<TrainingSample>), SamplingError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix) && h[prefix.len()..].parse::<usize>().is_ok()).count();
    let (n_p, n_q, n_a, n_b) = (count("p"), count("q"), count("alpha"), count("beta"));
    if header.get(0) != Some("id") || header.iter().next_back() != Some("objective") || n_p != n_q || n_b != n_a + 1 {
        return Err(SamplingError::Format("unexpected header".into()));
    }
    let width = 2 + n_p + n_q + n_a + n_b;
    if header.len() != width {
        return Err(SamplingError::Format(format!("header has {} columns, expected {width}", header.len())));
    }
    let mut samples = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let bad = |what: &str| SamplingError::Format(format!("row {}: {what}", line + 2));
        if record.len() != width {
            return Err(bad("wrong column count"));
        }
        let id: u64 = record[0].parse().map_err(|_| bad("invalid id"))?;
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|_| bad("invalid number"))?;
        let (x, rest) = values.split_at(n_p + n_q);
        let (alpha, rest) = rest.split_at(n_a);
        let (beta, objective) = rest.split_at(n_b);
        samples.push(TrainingSample {
            id,
            x: x.to_vec(),
            y: SetpointVector { alpha: alpha.to_vec(), beta: beta.to_vec() },
            objective: objective[0],
        });
    }
    Ok((n_p, n_b, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::load_builtin;

    fn diag(v: &[f64]) -> Vec<Vec<f64>> {
        (0..v.len()).map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(SamplerConfig::new(1.0, diag(&[1.0]), 0, 1, 0), Err(SamplingError::Deviation(_))));
        assert!(matches!(SamplerConfig::new(0.5, diag(&[1.0]), 0, 0, 0), Err(SamplingError::Thinning)));
        let indefinite = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(SamplerConfig::new(0.5, indefinite, 0, 1, 0), Err(SamplingError::NotPositiveDefinite)));
        let asym = vec![vec![1.0, 0.1], vec![0.0, 1.0]];
        assert!(matches!(SamplerConfig::new(0.5, asym, 0, 1, 0), Err(SamplingError::NotPositiveDefinite)));
    }

    #[test]
    fn truncated_draws_stay_in_box() {
        for &(a, b) in &[(-1.0, 1.0), (3.0, 4.0), (-40.0, -39.0), (8.0, 50.0), (0.0, 1e-9)] {
            for k in 0..100 {
                let z = truncated_std_normal(a, b, k as f64 / 100.0);
                assert!(z >= a && z <= b, "{z} outside [{a}, {b}]");
            }
        }
    }

    #[test]
    fn truncated_quantile_inverts_cdf() {
        for &(a, b) in &[(-1.0, 2.0), (2.5, 6.0), (-6.0, -2.5)] {
            for &u in &[0.1, 0.5, 0.9] {
                let z = truncated_std_normal(a, b, u);
                assert!((truncated_normal_cdf(z, 0.0, 1.0, a, b) - u).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unity_and_three_four_five_power_factors() {
        assert_eq!(reactive_from_power_factor(1.0, 1.0), 0.0);
        assert!((reactive_from_power_factor(1.0, 0.8) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn power_factor_histogram_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = vec![1.0; 10_000];
        let q = assign_power_factors(&p, &mut rng);
        let mut bins = [0usize; 20];
        for qi in q {
            let pf = 1.0 / (1.0 + qi * qi).sqrt();
            bins[(((pf - 0.8) / 0.2 * 20.0) as usize).min(19)] += 1;
        }
        let expected = 10_000.0 / 20.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 = {chi2}");
    }

    #[test]
    fn diagonal_covariance_gives_independent_coordinates() {
        let base = [1.0, 2.0];
        let cfg = SamplerConfig::new(0.7, diag(&[0.04, 0.16]), 50, 2, 9).unwrap();
        let xs = gibbs_sample_loads(&base, &cfg, 10_000).unwrap();
        let n = xs.len() as f64;
        let mean = |k: usize| xs.iter().map(|x| x[k]).sum::<f64>() / n;
        let (m0, m1) = (mean(0), mean(1));
        let cov = |a: usize, ma: f64, b: usize, mb: f64| xs.iter().map(|x| (x[a] - ma) * (x[b] - mb)).sum::<f64>() / n;
        let corr = cov(0, m0, 1, m1) / (cov(0, m0, 0, m0) * cov(1, m1, 1, m1)).sqrt();
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn correlated_chain_respects_box_and_correlation_sign() {
        let net = load_builtin("case14").unwrap();
        let cfg = SamplerConfig::for_network(&net, 5).unwrap();
        let (base, _) = net.base_loads();
        let xs = gibbs_sample_loads(&base, &cfg, 2000).unwrap();
        for x in &xs {
            for (v, p) in x.iter().zip(&base) {
                assert!(*v >= 0.3 * p && *v <= 1.7 * p);
            }
        }
        let n = xs.len() as f64;
        let m: Vec<f64> = (0..2).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n).collect();
        let c01: f64 = xs.iter().map(|x| (x[0] - m[0]) * (x[1] - m[1])).sum::<f64>() / n;
        assert!(c01 > 0.0);
    }

    #[test]
    fn covariance_styles() {
        let net = load_builtin("case14").unwrap();
        let (base, _) = net.base_loads();
        let id = build_covariance(&net, CovarianceStyle::ScaledIdentity { scale: 0.2 }).unwrap();
        assert!((id[0][0] - (0.2 * base[0]).powi(2)).abs() < 1e-15);
        assert_eq!(id[0][1], 0.0);
        let zero = build_covariance(&net, CovarianceStyle::DistanceDecay { scale: 0.2, rho: 0.0 }).unwrap();
        assert_eq!(zero, id);
        assert!(matches!(
            build_covariance(&net, CovarianceStyle::DistanceDecay { scale: 0.2, rho: 1.0 }),
            Err(SamplingError::DecayFactor(_))
        ));
    }

    #[test]
    fn same_seed_same_sequence() {
        let net = load_builtin("case14").unwrap();
        let cfg = SamplerConfig::for_network(&net, 11).unwrap();
        let a = ScenarioStream::new(&net, &cfg).unwrap().take(20);
        let b = ScenarioStream::new(&net, &cfg).unwrap().take(20);
        assert_eq!(a, b);
        let c = ScenarioStream::new(&net, &cfg.clone().with_seed(12)).unwrap().take(20);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_dataset_needs_no_solves() {
        let net = load_builtin("case2").unwrap();
        let cfg = SamplerConfig::for_network(&net, 1).unwrap();
        let ds = generate_dataset(&net, &cfg, 0.005, 0).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.attempted, 0);
    }

    #[test]
    fn two_bus_dataset_targets_in_unit_box() {
        let net = load_builtin("case2").unwrap();
        let cfg = SamplerConfig::for_network(&net, 2).unwrap();
        let ds = generate_dataset(&net, &cfg, 0.005, 100).unwrap();
        assert_eq!(ds.samples.len(), 100);
        for s in &ds.samples {
            assert_eq!(s.y.alpha.len(), 0);
            assert_eq!(s.y.beta.len(), 1);
            assert!(s.y.beta.iter().all(|b| (0.0..=1.0).contains(b)));
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let samples = vec![TrainingSample {
            id: 4,
            x: vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0],
            y: SetpointVector { alpha: vec![0.123456789012345678], beta: vec![0.5, 1e-300] },
            objective: 41864.18123456789,
        }];
        let mut buf = Vec::new();
        write_dataset(&mut buf, 2, 2, &samples).unwrap();
        let (n_load, n_gen, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!((n_load, n_gen), (2, 2));
        assert_eq!(back, samples);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(read_dataset("id,p0,q0,beta0,objective\n1,0.1,x,0.5,3\n".as_bytes()).is_err());
        assert!(read_dataset("foo,bar\n".as_bytes()).is_err());
    }
}
