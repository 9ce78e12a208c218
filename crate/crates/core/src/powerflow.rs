//! Bus admittance model and polar Newton–Raphson power flow.
//!
//! Two formulations share one solver: the standard problem where every
//! generator bus holds its voltage set-point, and the modified problem where
//! a subset of generators has its reactive output pinned, turning their
//! buses into load-type buses with free voltage magnitude.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_model::Network;
use crate::linalg::{Backend, SingularMatrix, Triplets};
use crate::sampling::LoadScenario;

/// Networks with fewer buses than this use dense factorizations.
pub const DENSE_BUS_LIMIT: usize = 50;

pub fn backend_for(network: &Network) -> Backend {
    if network.n_bus() < DENSE_BUS_LIMIT {
        Backend::Dense
    } else {
        Backend::Sparse
    }
}

/// Sparse complex bus admittance matrix in compressed-row form with sorted
/// column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Complex64> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[span.start + k])
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let mut m = vec![vec![Complex64::new(0.0, 0.0); self.dim]; self.dim];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, y) in self.row(i) {
                row[j] = y;
            }
        }
        m
    }

    /// Complex power injections `S = V .* conj(Y V)`.
    pub fn injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim)
            .map(|i| {
                let current: Complex64 = self.row(i).map(|(j, y)| y * v[j]).sum();
                v[i] * current.conj()
            })
            .collect()
    }
}

/// Assembles the bus admittance matrix from the π-model of every branch
/// (series impedance, total line charging split between the ends, off-nominal
/// tap on the from side with phase shift) plus bus shunts.
pub fn build_admittance(network: &Network) -> AdmittanceMatrix {
    let n = network.n_bus();
    let mut rows: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); n];
    let mut add = |i: usize, j: usize, y: Complex64| {
        *rows[i].entry(j).or_insert(Complex64::new(0.0, 0.0)) += y;
    };
    for br in &network.branches {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let charging = Complex64::new(0.0, br.b_charge / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);
        let ytt = ys + charging;
        let yff = ytt / (tap * tap.conj());
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        add(br.from_bus, br.from_bus, yff);
        add(br.from_bus, br.to_bus, yft);
        add(br.to_bus, br.from_bus, ytf);
        add(br.to_bus, br.to_bus, ytt);
    }
    for (i, bus) in network.buses.iter().enumerate() {
        if bus.g_shunt != 0.0 || bus.b_shunt != 0.0 {
            add(i, i, Complex64::new(bus.g_shunt, bus.b_shunt));
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for row in rows {
        for (j, y) in row {
            col_idx.push(j);
            values.push(y);
        }
        row_ptr.push(col_idx.len());
    }
    AdmittanceMatrix { dim: n, row_ptr, col_idx, values }
}

/// Active and reactive injections computed from polar voltages.
pub(crate) fn calc_injections(y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.dim();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for (j, yij) in y.row(i) {
            if i == j {
                p[i] += vm[i] * vm[i] * yij.re;
                q[i] -= vm[i] * vm[i] * yij.im;
            } else {
                let (s, c) = (va[i] - va[j]).sin_cos();
                let vv = vm[i] * vm[j];
                p[i] += vv * (yij.re * c + yij.im * s);
                q[i] += vv * (yij.re * s - yij.im * c);
            }
        }
    }
    (p, q)
}

/// Which injection a derivative belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Injection {
    P,
    Q,
}

/// Which voltage coordinate a derivative is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Coord {
    Angle,
    Magnitude,
}

/// Visits every structurally nonzero first derivative of the bus injections
/// as `(injection, bus, coordinate, wrt_bus, value)`. The same pair may be
/// visited several times; contributions are additive.
pub(crate) fn visit_injection_jacobian(
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    mut visit: impl FnMut(Injection, usize, Coord, usize, f64),
) {
    use Coord::*;
    use Injection::*;
    for i in 0..y.dim() {
        for (j, yij) in y.row(i) {
            let (g, b) = (yij.re, yij.im);
            if i == j {
                visit(P, i, Magnitude, i, 2.0 * vm[i] * g);
                visit(Q, i, Magnitude, i, -2.0 * vm[i] * b);
                continue;
            }
            let (s, c) = (va[i] - va[j]).sin_cos();
            let vv = vm[i] * vm[j];
            let p_term = g * c + b * s;
            let q_term = g * s - b * c;
            let dp_dth = vv * (-g * s + b * c);
            let dq_dth = vv * (g * c + b * s);
            visit(P, i, Angle, i, dp_dth);
            visit(P, i, Angle, j, -dp_dth);
            visit(P, i, Magnitude, i, vm[j] * p_term);
            visit(P, i, Magnitude, j, vm[i] * p_term);
            visit(Q, i, Angle, i, dq_dth);
            visit(Q, i, Angle, j, -dq_dth);
            visit(Q, i, Magnitude, i, vm[j] * q_term);
            visit(Q, i, Magnitude, j, vm[i] * q_term);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub magnitude: Vec<f64>,
    /// Radians; zero at the slack bus.
    pub angle: Vec<f64>,
}

impl VoltageState {
    pub fn flat(n: usize) -> Self {
        VoltageState { magnitude: vec![1.0; n], angle: vec![0.0; n] }
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(&self.angle)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }
}

/// Set-points and demand defining one power-flow problem.
///
/// `v_setpoints` and `p_setpoints` are indexed by generator; the slack
/// generator's active set-point is ignored. `q_fixed` pins the reactive
/// output of the listed generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSpec {
    pub loads: LoadScenario,
    pub v_setpoints: Vec<f64>,
    pub p_setpoints: Vec<f64>,
    pub q_fixed: BTreeMap<usize, f64>,
}

impl PfSpec {
    /// Standard formulation with the given set-points.
    pub fn new(loads: LoadScenario, v_setpoints: Vec<f64>, p_setpoints: Vec<f64>) -> Self {
        PfSpec { loads, v_setpoints, p_setpoints, q_fixed: BTreeMap::new() }
    }

    /// Base loads with the dispatch and voltage set-points from the case file.
    pub fn from_case(network: &Network) -> Self {
        PfSpec::new(
            LoadScenario::base(network),
            network.generators.iter().map(|g| g.v_set).collect(),
            network.generators.iter().map(|g| g.p_set).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub voltages: VoltageState,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    /// Net injections `generation - demand` per bus.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
}

impl OperatingPoint {
    /// Builds a point from voltages and generator outputs under the given
    /// demand.
    pub fn assemble(
        network: &Network,
        voltages: VoltageState,
        p_gen: Vec<f64>,
        q_gen: Vec<f64>,
        loads: &LoadScenario,
    ) -> Self {
        let (p_load, q_load) = loads.bus_vectors(network);
        let mut p_inj: Vec<f64> = p_load.iter().map(|p| -p).collect();
        let mut q_inj: Vec<f64> = q_load.iter().map(|q| -q).collect();
        for (g, gen) in network.generators.iter().enumerate() {
            p_inj[gen.bus] += p_gen[g];
            q_inj[gen.bus] += q_gen[g];
        }
        OperatingPoint { voltages, p_gen, q_gen, p_inj, q_inj }
    }

    /// Full power-flow residual `h`: active then reactive balance at every
    /// bus (net injection minus what the network draws at these voltages).
    pub fn residual(&self, y: &AdmittanceMatrix) -> Vec<f64> {
        let (p, q) = calc_injections(y, &self.voltages.magnitude, &self.voltages.angle);
        let mut h: Vec<f64> = self.p_inj.iter().zip(&p).map(|(a, b)| a - b).collect();
        h.extend(self.q_inj.iter().zip(&q).map(|(a, b)| a - b));
        h
    }

    pub fn residual_norm(&self, y: &AdmittanceMatrix) -> f64 {
        self.residual(y).iter().map(|r| r * r).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("power flow did not converge in {iterations} iterations (mismatch trace {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },
    #[error("singular Jacobian at iteration {iteration}: {source}")]
    SingularJacobian {
        iteration: usize,
        #[source]
        source: SingularMatrix,
    },
    #[error("invalid power-flow specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial voltages; controlled magnitudes are overwritten by their
    /// set-points. Flat start when absent.
    pub warm_start: Option<VoltageState>,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-9, max_iter: 30, warm_start: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub point: OperatingPoint,
    pub iterations: usize,
    /// Infinity norm of the mismatch at every iterate, starting point first.
    pub trace: Vec<f64>,
}

/// A power-flow problem bound to a network: unknown layout, specified
/// injections, and the mismatch/Jacobian pair used by Newton's method.
#[derive(Debug, Clone)]
pub struct PfSystem<'a> {
    network: &'a Network,
    ybus: &'a AdmittanceMatrix,
    spec: &'a PfSpec,
    /// Non-slack buses (angle unknowns, active residuals).
    angle_buses: Vec<usize>,
    /// Buses whose magnitude is free (reactive residuals).
    magnitude_buses: Vec<usize>,
    /// Voltage target per bus for controlled buses.
    v_target: Vec<Option<f64>>,
    p_spec: Vec<f64>,
    q_spec: Vec<f64>,
}

impl<'a> PfSystem<'a> {
    pub fn new(
        network: &'a Network,
        ybus: &'a AdmittanceMatrix,
        spec: &'a PfSpec,
    ) -> Result<Self, PfError> {
        let n = network.n_bus();
        let ng = network.n_gen();
        if spec.v_setpoints.len() != ng || spec.p_setpoints.len() != ng {
            return Err(PfError::InvalidSpec(format!(
                "expected {ng} voltage and active set-points, got {} and {}",
                spec.v_setpoints.len(),
                spec.p_setpoints.len()
            )));
        }
        if spec.loads.p_load.len() != network.n_load() || spec.loads.q_load.len() != network.n_load() {
            return Err(PfError::InvalidSpec(format!(
                "load scenario has {} entries, network has {} load buses",
                spec.loads.p_load.len(),
                network.n_load()
            )));
        }
        if let Some((&g, _)) = spec.q_fixed.iter().find(|(&g, _)| g >= ng) {
            return Err(PfError::InvalidSpec(format!("pinned generator {g} does not exist")));
        }
        let slack_gen = network.slack_generator();
        let (p_load, q_load) = spec.loads.bus_vectors(network);
        let mut v_target = vec![None; n];
        let mut p_spec: Vec<f64> = p_load.iter().map(|p| -p).collect();
        let mut q_spec: Vec<f64> = q_load.iter().map(|q| -q).collect();
        for (g, gen) in network.generators.iter().enumerate() {
            if Some(g) != slack_gen {
                p_spec[gen.bus] += spec.p_setpoints[g];
            }
            match spec.q_fixed.get(&g) {
                Some(&q) => q_spec[gen.bus] += q,
                None => {
                    if v_target[gen.bus].is_none() {
                        v_target[gen.bus] = Some(spec.v_setpoints[g]);
                    }
                }
            }
        }
        if let Some(bad) = v_target.iter().flatten().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(PfError::InvalidSpec(format!("voltage set-point {bad} is not positive")));
        }
        let angle_buses = (0..n).filter(|&i| i != network.slack_index).collect();
        let magnitude_buses = (0..n).filter(|&i| v_target[i].is_none()).collect();
        Ok(PfSystem { network, ybus, spec, angle_buses, magnitude_buses, v_target, p_spec, q_spec })
    }

    pub fn n_unknowns(&self) -> usize {
        self.angle_buses.len() + self.magnitude_buses.len()
    }

    /// Buses holding a voltage set-point, as `(bus, target)`.
    pub fn controlled_buses(&self) -> Vec<(usize, f64)> {
        self.v_target.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect()
    }

    /// Buses whose reactive balance enters the mismatch.
    pub fn magnitude_buses(&self) -> &[usize] {
        &self.magnitude_buses
    }

    pub fn angle_buses(&self) -> &[usize] {
        &self.angle_buses
    }

    /// Starting state: set-point magnitudes at controlled buses, the warm
    /// start (or 1.0 and zero angle) elsewhere.
    pub fn initial_state(&self, warm: Option<&VoltageState>) -> VoltageState {
        let n = self.network.n_bus();
        let mut state = match warm {
            Some(w) if w.magnitude.len() == n => w.clone(),
            _ => VoltageState::flat(n),
        };
        self.impose_setpoints(&mut state);
        state
    }

    fn impose_setpoints(&self, state: &mut VoltageState) {
        for (i, v) in self.v_target.iter().enumerate() {
            if let Some(v) = v {
                state.magnitude[i] = *v;
            }
        }
        state.angle[self.network.slack_index] = 0.0;
    }

    pub fn unknowns(&self, state: &VoltageState) -> Vec<f64> {
        self.angle_buses
            .iter()
            .map(|&i| state.angle[i])
            .chain(self.magnitude_buses.iter().map(|&i| state.magnitude[i]))
            .collect()
    }

    pub fn set_unknowns(&self, state: &mut VoltageState, x: &[f64]) {
        let na = self.angle_buses.len();
        for (k, &i) in self.angle_buses.iter().enumerate() {
            state.angle[i] = x[k];
        }
        for (k, &i) in self.magnitude_buses.iter().enumerate() {
            state.magnitude[i] = x[na + k];
        }
    }

    /// Specified minus computed injection: active balance at every non-slack
    /// bus, then reactive balance at every bus without a voltage set-point.
    pub fn mismatch(&self, state: &VoltageState) -> Vec<f64> {
        let (p, q) = calc_injections(self.ybus, &state.magnitude, &state.angle);
        self.angle_buses
            .iter()
            .map(|&i| self.p_spec[i] - p[i])
            .chain(self.magnitude_buses.iter().map(|&i| self.q_spec[i] - q[i]))
            .collect()
    }

    /// Derivative of [`PfSystem::mismatch`] with respect to
    /// [`PfSystem::unknowns`].
    pub fn jacobian(&self, state: &VoltageState) -> Triplets {
        let n = self.network.n_bus();
        let na = self.angle_buses.len();
        let mut p_row = vec![usize::MAX; n];
        let mut q_row = vec![usize::MAX; n];
        let mut th_col = vec![usize::MAX; n];
        let mut vm_col = vec![usize::MAX; n];
        for (k, &i) in self.angle_buses.iter().enumerate() {
            p_row[i] = k;
            th_col[i] = k;
        }
        for (k, &i) in self.magnitude_buses.iter().enumerate() {
            q_row[i] = na + k;
            vm_col[i] = na + k;
        }
        let mut t = Triplets::with_capacity(self.n_unknowns(), 8 * self.ybus.nnz());
        visit_injection_jacobian(self.ybus, &state.magnitude, &state.angle, |inj, i, coord, j, d| {
            let row = match inj {
                Injection::P => p_row[i],
                Injection::Q => q_row[i],
            };
            let col = match coord {
                Coord::Angle => th_col[j],
                Coord::Magnitude => vm_col[j],
            };
            if row != usize::MAX && col != usize::MAX {
                t.push(row, col, -d);
            }
        });
        t
    }

    pub fn jacobian_dense(&self, state: &VoltageState) -> Vec<Vec<f64>> {
        self.jacobian(state).to_dense()
    }

    /// Newton–Raphson iteration from the given start.
    pub fn solve(&self, options: &PfOptions) -> Result<PfSolution, PfError> {
        let backend = backend_for(self.network);
        let mut state = self.initial_state(options.warm_start.as_ref());
        let mut x = self.unknowns(&state);
        let mut trace = Vec::new();
        let mut iteration = 0;
        loop {
            let f = self.mismatch(&state);
            let norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            trace.push(norm);
            if norm < options.tol {
                break;
            }
            if iteration >= options.max_iter || !norm.is_finite() {
                return Err(PfError::NonConvergence { iterations: iteration, trace });
            }
            iteration += 1;
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let dx = self
                .jacobian(&state)
                .solve(&rhs, backend)
                .map_err(|source| PfError::SingularJacobian { iteration, source })?;
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
            self.set_unknowns(&mut state, &x);
        }
        let point = self.operating_point(state);
        Ok(PfSolution { point, iterations: iteration, trace })
    }

    /// Recovers generator outputs at a solved state. The slack generator
    /// takes the active balance at its bus; free reactive output at a bus is
    /// shared among its unpinned generators in proportion to their ranges.
    pub fn operating_point(&self, state: VoltageState) -> OperatingPoint {
        let net = self.network;
        let (p_calc, q_calc) = calc_injections(self.ybus, &state.magnitude, &state.angle);
        let (p_load, q_load) = self.spec.loads.bus_vectors(net);
        let slack_gen = net.slack_generator();
        let mut p_gen = self.spec.p_setpoints.clone();
        let mut q_gen = vec![0.0; net.n_gen()];
        if let Some(sg) = slack_gen {
            let s = net.slack_index;
            let others: f64 = net
                .generators
                .iter()
                .enumerate()
                .filter(|&(g, gen)| gen.bus == s && g != sg)
                .map(|(g, _)| self.spec.p_setpoints[g])
                .sum();
            p_gen[sg] = p_calc[s] + p_load[s] - others;
        }
        for (bus, gens) in net.generators_at().iter().enumerate() {
            let mut free = Vec::new();
            let mut fixed_total = 0.0;
            for &g in gens {
                match self.spec.q_fixed.get(&g) {
                    Some(&q) => {
                        q_gen[g] = q;
                        fixed_total += q;
                    }
                    None => free.push(g),
                }
            }
            if !free.is_empty() {
                let total = q_calc[bus] + q_load[bus] - fixed_total;
                split_reactive(net, &free, total, &mut q_gen);
            }
        }
        OperatingPoint::assemble(net, state, p_gen, q_gen, &self.spec.loads)
    }
}

/// Shares a bus-level reactive output among generators in proportion to their
/// reactive ranges (equal shares when the ranges are degenerate or unbounded).
pub fn split_reactive(network: &Network, gens: &[usize], total: f64, q_gen: &mut [f64]) {
    if gens.len() == 1 {
        q_gen[gens[0]] = total;
        return;
    }
    let q_min: f64 = gens.iter().map(|&g| network.generators[g].q_min).sum();
    let range: f64 = gens
        .iter()
        .map(|&g| network.generators[g].q_max - network.generators[g].q_min)
        .sum();
    if range > 0.0 && range.is_finite() && q_min.is_finite() {
        for &g in gens {
            let gen = &network.generators[g];
            q_gen[g] = gen.q_min + (gen.q_max - gen.q_min) / range * (total - q_min);
        }
    } else {
        for &g in gens {
            q_gen[g] = total / gens.len() as f64;
        }
    }
}

/// Holds a network with its admittance matrix for repeated solves.
#[derive(Debug, Clone)]
pub struct PowerFlow<'a> {
    pub network: &'a Network,
    pub ybus: AdmittanceMatrix,
}

impl<'a> PowerFlow<'a> {
    pub fn new(network: &'a Network) -> Self {
        PowerFlow { network, ybus: build_admittance(network) }
    }

    pub fn system<'s>(&'s self, spec: &'s PfSpec) -> Result<PfSystem<'s>, PfError> {
        PfSystem::new(self.network, &self.ybus, spec)
    }

    /// Standard formulation: every generator bus holds its set-point.
    pub fn solve(&self, spec: &PfSpec, options: &PfOptions) -> Result<PfSolution, PfError> {
        if !spec.q_fixed.is_empty() {
            return Err(PfError::InvalidSpec(
                "standard power flow takes no pinned reactive outputs".into(),
            ));
        }
        self.system(spec)?.solve(options)
    }

    /// Modified formulation: generators in `spec.q_fixed` inject exactly the
    /// pinned reactive power and their buses lose their voltage set-point.
    pub fn solve_modified(&self, spec: &PfSpec, options: &PfOptions) -> Result<PfSolution, PfError> {
        self.system(spec)?.solve(options)
    }
}

/// Mismatch of `spec` at `state` (see [`PfSystem::mismatch`]).
pub fn mismatch(network: &Network, state: &VoltageState, spec: &PfSpec) -> Result<Vec<f64>, PfError> {
    let ybus = build_admittance(network);
    Ok(PfSystem::new(network, &ybus, spec)?.mismatch(state))
}

pub fn solve_pf(network: &Network, spec: &PfSpec, options: &PfOptions) -> Result<PfSolution, PfError> {
    PowerFlow::new(network).solve(spec, options)
}

pub fn solve_pf_modified(
    network: &Network,
    spec: &PfSpec,
    options: &PfOptions,
) -> Result<PfSolution, PfError> {
    PowerFlow::new(network).solve_modified(spec, options)
}
