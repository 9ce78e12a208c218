//! AC optimal power flow by a primal-dual interior-point method.
//!
//! The same solver handles the full problem and the restricted variant whose
//! voltage-magnitude box is shrunk by a margin `lambda` on both sides.
//! Variables are polar voltages (slack angle eliminated) and generator
//! outputs; every bound is a log-barrier inequality, the nodal power balance
//! is the equality set. Each iteration solves the reduced KKT system once for
//! an affine predictor and once more, with the same factorization, for a
//! Mehrotra-style centring corrector.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_model::Network;
use crate::linalg::{Factorization, SingularMatrix, Triplets};
use crate::powerflow::{
    backend_for, build_admittance, calc_injections, visit_injection_jacobian, AdmittanceMatrix,
    Coord, Injection, OperatingPoint, VoltageState,
};
use crate::sampling::LoadScenario;

/// Scales the objective inside the iteration so that cost and power-balance
/// multipliers have comparable magnitude.
const COST_SCALE: f64 = 1e-4;
const STEP_FRACTION: f64 = 0.99995;
const MIN_STEP: f64 = 1e-8;

/// Default voltage margins evaluated in the experiments.
pub const LAMBDA_GRID: [f64; 3] = [0.0, 0.005, 0.01];

#[derive(Debug, Clone, PartialEq)]
pub struct OpfProblem<'a> {
    pub network: &'a Network,
    pub loads: LoadScenario,
    /// Per-unit margin removed from both ends of every voltage box.
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// Largest equality or bound violation.
    pub feasibility: f64,
    /// Scaled stationarity residual of the Lagrangian.
    pub gradient: f64,
    /// Scaled complementarity gap.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub point: OperatingPoint,
    /// $/hr.
    pub objective: f64,
    pub converged: bool,
    /// Seconds of wall-clock time inside the interior-point iteration.
    pub solve_time: f64,
    pub iterations: usize,
    pub lambda: f64,
    pub kkt: KktResidual,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error("problem is infeasible: {reason} (after {iterations} iterations)")]
    Infeasible { reason: String, iterations: usize },
    #[error("no convergence within {iterations} iterations")]
    MaxIterations { iterations: usize },
    #[error("numerical failure at iteration {iteration}: {reason}")]
    Numerical { iteration: usize, reason: String },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

impl OpfError {
    /// Infeasibility and breakdowns are both reasons to discard a scenario.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, OpfError::Infeasible { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfOptions {
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub comp_tol: f64,
    pub cost_tol: f64,
    pub max_iter: usize,
    /// Use the predictor-corrector step; plain path-following otherwise.
    pub predictor_corrector: bool,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            feas_tol: 1e-8,
            grad_tol: 1e-8,
            comp_tol: 1e-8,
            cost_tol: 1e-8,
            max_iter: 150,
            predictor_corrector: true,
        }
    }
}

/// `s * x[var] - c <= 0`.
#[derive(Debug, Clone, Copy)]
struct Bound {
    var: usize,
    sign: f64,
    c: f64,
}

/// Variable layout: `[angles (non-slack), magnitudes, p_gen, q_gen]`.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    ng: usize,
    slack: usize,
}

impl Layout {
    fn nx(&self) -> usize {
        2 * self.n - 1 + 2 * self.ng
    }
    fn th(&self, i: usize) -> Option<usize> {
        match i.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(i),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(i - 1),
        }
    }
    fn vm(&self, i: usize) -> usize {
        self.n - 1 + i
    }
    fn pg(&self, g: usize) -> usize {
        2 * self.n - 1 + g
    }
    fn qg(&self, g: usize) -> usize {
        2 * self.n - 1 + self.ng + g
    }
    fn var(&self, c: Coord, i: usize) -> Option<usize> {
        match c {
            Coord::Angle => self.th(i),
            Coord::Magnitude => Some(self.vm(i)),
        }
    }
    fn angles(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.th(i).map_or(0.0, |k| x[k])).collect()
    }
    fn magnitudes<'x>(&self, x: &'x [f64]) -> &'x [f64] {
        &x[self.n - 1..2 * self.n - 1]
    }
}

/// Reusable OPF solver for one network (admittance matrix built once).
#[derive(Debug, Clone)]
pub struct OpfSolver<'a> {
    pub network: &'a Network,
    pub ybus: AdmittanceMatrix,
}

struct Eval {
    f: f64,
    df: Vec<f64>,
    /// Equality residuals: `2n` balances then fixed-variable rows.
    g: Vec<f64>,
    /// Equality Jacobian as (row = constraint, col = variable) entries.
    dg: Vec<(usize, usize, f64)>,
    h: Vec<f64>,
}

impl<'a> OpfSolver<'a> {
    pub fn new(network: &'a Network) -> Self {
        OpfSolver { network, ybus: build_admittance(network) }
    }

    fn layout(&self) -> Layout {
        Layout { n: self.network.n_bus(), ng: self.network.n_gen(), slack: self.network.slack_index }
    }

    /// Splits variable bounds into inequalities and (for collapsed boxes)
    /// fixed-value equalities.
    fn bounds(&self, lay: &Layout, lambda: f64) -> Result<(Vec<Bound>, Vec<(usize, f64)>), OpfError> {
        let net = self.network;
        let mut boxes: Vec<(usize, f64, f64)> = Vec::new();
        for (i, bus) in net.buses.iter().enumerate() {
            let lo = bus.v_min + lambda;
            let hi = bus.v_max - lambda;
            if lo > hi + 1e-12 {
                return Err(OpfError::Infeasible {
                    reason: format!(
                        "voltage margin {lambda} empties the box [{}, {}] at bus {}",
                        bus.v_min, bus.v_max, bus.id
                    ),
                    iterations: 0,
                });
            }
            boxes.push((lay.vm(i), lo, hi.max(lo)));
        }
        for (g, gen) in net.generators.iter().enumerate() {
            boxes.push((lay.pg(g), gen.p_min, gen.p_max));
            boxes.push((lay.qg(g), gen.q_min, gen.q_max));
        }
        let mut ineq = Vec::new();
        let mut fixed = Vec::new();
        for (var, lo, hi) in boxes {
            if (hi - lo).abs() <= 1e-12 {
                fixed.push((var, lo));
                continue;
            }
            if hi.is_finite() {
                ineq.push(Bound { var, sign: 1.0, c: hi });
            }
            if lo.is_finite() {
                ineq.push(Bound { var, sign: -1.0, c: -lo });
            }
        }
        Ok((ineq, fixed))
    }

    fn initial_point(&self, lay: &Layout, seed: Option<&OperatingPoint>) -> Vec<f64> {
        let net = self.network;
        let mut x = vec![0.0; lay.nx()];
        let mid = |lo: f64, hi: f64| match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => 0.0,
        };
        for (i, bus) in net.buses.iter().enumerate() {
            x[lay.vm(i)] = 0.5 * (bus.v_min + bus.v_max);
        }
        for (g, gen) in net.generators.iter().enumerate() {
            x[lay.pg(g)] = mid(gen.p_min, gen.p_max);
            x[lay.qg(g)] = mid(gen.q_min, gen.q_max);
        }
        if let Some(p) = seed {
            for i in 0..lay.n {
                if let Some(k) = lay.th(i) {
                    x[k] = p.voltages.angle[i] - p.voltages.angle[lay.slack];
                }
                x[lay.vm(i)] = p.voltages.magnitude[i];
            }
            for g in 0..lay.ng {
                x[lay.pg(g)] = p.p_gen[g];
                x[lay.qg(g)] = p.q_gen[g];
            }
        }
        x
    }

    fn evaluate(
        &self,
        lay: &Layout,
        x: &[f64],
        p_load: &[f64],
        q_load: &[f64],
        ineq: &[Bound],
        fixed: &[(usize, f64)],
    ) -> Eval {
        let net = self.network;
        let base = net.base_mva;
        let mut f = 0.0;
        let mut df = vec![0.0; lay.nx()];
        for (g, gen) in net.generators.iter().enumerate() {
            let p_mw = x[lay.pg(g)] * base;
            f += COST_SCALE * gen.cost.eval(p_mw);
            df[lay.pg(g)] = COST_SCALE * base * gen.cost.slope(p_mw);
        }
        let va = lay.angles(x);
        let vm = lay.magnitudes(x);
        let (p, q) = calc_injections(&self.ybus, vm, &va);
        let n = lay.n;
        let mut g = Vec::with_capacity(2 * n + fixed.len());
        g.extend((0..n).map(|i| p[i] + p_load[i]));
        g.extend((0..n).map(|i| q[i] + q_load[i]));
        let mut dg = Vec::with_capacity(8 * self.ybus.nnz() + 2 * lay.ng + fixed.len());
        visit_injection_jacobian(&self.ybus, vm, &va, |inj, i, coord, j, d| {
            if let Some(col) = lay.var(coord, j) {
                let row = match inj {
                    Injection::P => i,
                    Injection::Q => n + i,
                };
                dg.push((row, col, d));
            }
        });
        for (k, gen) in net.generators.iter().enumerate() {
            g[gen.bus] -= x[lay.pg(k)];
            g[n + gen.bus] -= x[lay.qg(k)];
            dg.push((gen.bus, lay.pg(k), -1.0));
            dg.push((n + gen.bus, lay.qg(k), -1.0));
        }
        for (r, &(var, value)) in fixed.iter().enumerate() {
            g.push(x[var] - value);
            dg.push((2 * n + r, var, 1.0));
        }
        let h = ineq.iter().map(|b| b.sign * x[b.var] - b.c).collect();
        Eval { f, df, g, dg, h }
    }

    /// Hessian of the Lagrangian restricted to the nonlinear terms (cost and
    /// power balances); bounds and fixed rows are linear.
    fn lagrangian_hessian(&self, lay: &Layout, x: &[f64], lam: &[f64], out: &mut Triplets) {
        let net = self.network;
        let base = net.base_mva;
        for (g, gen) in net.generators.iter().enumerate() {
            let k = lay.pg(g);
            out.push(k, k, COST_SCALE * 2.0 * gen.cost.c2 * base * base);
        }
        let n = lay.n;
        let va = lay.angles(x);
        let vm = lay.magnitudes(x);
        let (lam_p, lam_q) = (&lam[..n], &lam[n..2 * n]);
        let mut put = |a: Option<usize>, b: Option<usize>, v: f64| {
            if let (Some(a), Some(b)) = (a, b) {
                out.push(a, b, v);
            }
        };
        for i in 0..n {
            for (j, y) in self.ybus.row(i) {
                let (gij, bij) = (y.re, y.im);
                let (wp, wq) = (lam_p[i], lam_q[i]);
                if i == j {
                    let vi = Some(lay.vm(i));
                    put(vi, vi, 2.0 * (wp * gij - wq * bij));
                    continue;
                }
                let a = wp * gij - wq * bij;
                let b = wp * bij + wq * gij;
                let (s, c) = (va[i] - va[j]).sin_cos();
                let phi = a * c + b * s;
                let dphi = -a * s + b * c;
                let vv = vm[i] * vm[j];
                let (ti, tj) = (lay.th(i), lay.th(j));
                let (mi, mj) = (Some(lay.vm(i)), Some(lay.vm(j)));
                put(ti, ti, -vv * phi);
                put(tj, tj, -vv * phi);
                put(ti, tj, vv * phi);
                put(tj, ti, vv * phi);
                let sym = |put: &mut dyn FnMut(Option<usize>, Option<usize>, f64), r, c, v| {
                    put(r, c, v);
                    put(c, r, v);
                };
                sym(&mut put, ti, mi, vm[j] * dphi);
                sym(&mut put, ti, mj, vm[i] * dphi);
                sym(&mut put, tj, mi, -vm[j] * dphi);
                sym(&mut put, tj, mj, -vm[i] * dphi);
                sym(&mut put, mi, mj, phi);
            }
        }
    }

    /// Solves the OPF (or its restricted variant when `lambda > 0`).
    pub fn solve(
        &self,
        loads: &LoadScenario,
        lambda: f64,
        seed: Option<&OperatingPoint>,
        options: &OpfOptions,
    ) -> Result<OpfSolution, OpfError> {
        let start = Instant::now();
        let net = self.network;
        if !(lambda >= 0.0) {
            return Err(OpfError::InvalidProblem(format!("negative voltage margin {lambda}")));
        }
        if loads.p_load.len() != net.n_load() || loads.q_load.len() != net.n_load() {
            return Err(OpfError::InvalidProblem(format!(
                "load scenario has {} entries, network has {} load buses",
                loads.p_load.len(),
                net.n_load()
            )));
        }
        if net.n_gen() == 0 {
            return Err(OpfError::InvalidProblem("network has no generators".into()));
        }
        let lay = self.layout();
        let (ineq, fixed) = self.bounds(&lay, lambda)?;
        let (p_load, q_load) = loads.bus_vectors(net);
        let backend = backend_for(net);
        let nx = lay.nx();
        let niq = ineq.len();

        let mut x = self.initial_point(&lay, seed);
        let mut ev = self.evaluate(&lay, &x, &p_load, &q_load, &ineq, &fixed);
        let neq = ev.g.len();
        let mut gamma = 1.0;
        let mut lam = vec![0.0; neq];
        let mut z: Vec<f64> = ev.h.iter().map(|&h| if h < -1.0 { -h } else { 1.0 }).collect();
        let mut mu: Vec<f64> = z.iter().map(|&zk| if gamma / zk > 1.0 { gamma / zk } else { 1.0 }).collect();
        let mut f0 = ev.f;
        let mut history: Vec<f64> = Vec::new();

        let mut lx = self.lagrangian_gradient(&ev, &lam, &mu, &ineq, nx);
        let mut kkt = self.conditions(&ev, &x, &z, &lam, &mu, &lx, f0);

        for iteration in 1..=options.max_iter {
            // Reduced KKT matrix [M dg'; dg 0].
            let mut kkt_mat = Triplets::with_capacity(nx + neq, 16 * self.ybus.nnz() + 2 * ev.dg.len());
            self.lagrangian_hessian(&lay, &x, &lam, &mut kkt_mat);
            let mut diag = vec![0.0; nx];
            for (k, b) in ineq.iter().enumerate() {
                diag[b.var] += mu[k] / z[k];
            }
            for (j, d) in diag.iter().enumerate() {
                kkt_mat.push(j, j, *d);
            }
            for &(r, c, v) in &ev.dg {
                kkt_mat.push(nx + r, c, v);
                kkt_mat.push(c, nx + r, v);
            }
            let factor = kkt_mat.factor(backend).map_err(|e| numerical(iteration, e))?;

            let step = |r: &[f64]| -> Result<Direction, OpfError> {
                self.direction(&factor, &ev, &lx, &z, &mu, &ineq, r, nx)
                    .map_err(|e| numerical(iteration, e))
            };
            let dir = if options.predictor_corrector && niq > 0 {
                let affine = step(&vec![0.0; niq])?;
                let ap = max_step(&z, &affine.dz);
                let ad = max_step(&mu, &affine.dmu);
                let gap = dot(&z, &mu) / niq as f64;
                let gap_aff = z
                    .iter()
                    .zip(&affine.dz)
                    .zip(mu.iter().zip(&affine.dmu))
                    .map(|((zk, dzk), (mk, dmk))| (zk + ap * dzk) * (mk + ad * dmk))
                    .sum::<f64>()
                    / niq as f64;
                let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
                gamma = sigma * gap;
                let r: Vec<f64> = affine
                    .dz
                    .iter()
                    .zip(&affine.dmu)
                    .map(|(dz, dm)| gamma - dz * dm)
                    .collect();
                step(&r)?
            } else {
                step(&vec![gamma; niq])?
            };

            let alpha_p = (STEP_FRACTION * max_step_raw(&z, &dir.dz)).min(1.0);
            let alpha_d = (STEP_FRACTION * max_step_raw(&mu, &dir.dmu)).min(1.0);
            for (xi, d) in x.iter_mut().zip(&dir.dx) {
                *xi += alpha_p * d;
            }
            for (zk, d) in z.iter_mut().zip(&dir.dz) {
                *zk += alpha_p * d;
            }
            for (l, d) in lam.iter_mut().zip(&dir.dlam) {
                *l += alpha_d * d;
            }
            for (m, d) in mu.iter_mut().zip(&dir.dmu) {
                *m += alpha_d * d;
            }
            if niq > 0 && !options.predictor_corrector {
                gamma = 0.1 * dot(&z, &mu) / niq as f64;
            }

            ev = self.evaluate(&lay, &x, &p_load, &q_load, &ineq, &fixed);
            lx = self.lagrangian_gradient(&ev, &lam, &mu, &ineq, nx);
            kkt = self.conditions(&ev, &x, &z, &lam, &mu, &lx, f0);
            history.push(kkt.0.feasibility);

            if kkt.0.feasibility < options.feas_tol
                && kkt.0.gradient < options.grad_tol
                && kkt.0.complementarity < options.comp_tol
                && kkt.1 < options.cost_tol
            {
                return Ok(self.finish(&lay, &x, loads, lambda, iteration, kkt.0, start));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(OpfError::Numerical { iteration, reason: "non-finite iterate".into() });
            }
            if lay_magnitudes_diverged(lay.magnitudes(&x)) {
                return Err(OpfError::Infeasible {
                    reason: "voltage magnitudes diverged".into(),
                    iterations: iteration,
                });
            }
            if alpha_p < MIN_STEP || alpha_d < MIN_STEP {
                return Err(OpfError::Infeasible {
                    reason: format!("step length collapsed (primal {alpha_p:e}, dual {alpha_d:e})"),
                    iterations: iteration,
                });
            }
            if niq > 0 && dot(&z, &mu) / (niq as f64) < 1e-12 && stagnant(&history, 10) {
                return Err(OpfError::Infeasible {
                    reason: format!(
                        "barrier parameter vanished with primal infeasibility stuck at {:e}",
                        kkt.0.feasibility
                    ),
                    iterations: iteration,
                });
            }
            f0 = ev.f;
        }
        let _ = kkt;
        Err(OpfError::MaxIterations { iterations: options.max_iter })
    }

    fn lagrangian_gradient(&self, ev: &Eval, lam: &[f64], mu: &[f64], ineq: &[Bound], nx: usize) -> Vec<f64> {
        let mut lx = ev.df.clone();
        debug_assert_eq!(lx.len(), nx);
        for &(r, c, v) in &ev.dg {
            lx[c] += v * lam[r];
        }
        for (k, b) in ineq.iter().enumerate() {
            lx[b.var] += b.sign * mu[k];
        }
        lx
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        factor: &Factorization,
        ev: &Eval,
        lx: &[f64],
        z: &[f64],
        mu: &[f64],
        ineq: &[Bound],
        r: &[f64],
        nx: usize,
    ) -> Result<Direction, SingularMatrix> {
        let mut rhs = Vec::with_capacity(nx + ev.g.len());
        let mut n_vec = lx.to_vec();
        for (k, b) in ineq.iter().enumerate() {
            n_vec[b.var] += b.sign * (mu[k] * ev.h[k] + r[k]) / z[k];
        }
        rhs.extend(n_vec.iter().map(|v| -v));
        rhs.extend(ev.g.iter().map(|v| -v));
        let sol = factor.solve(&rhs)?;
        let dx = sol[..nx].to_vec();
        let dlam = sol[nx..].to_vec();
        let dz: Vec<f64> = ineq
            .iter()
            .enumerate()
            .map(|(k, b)| -ev.h[k] - z[k] - b.sign * dx[b.var])
            .collect();
        let dmu = (0..ineq.len()).map(|k| -mu[k] + (r[k] - mu[k] * dz[k]) / z[k]).collect();
        Ok(Direction { dx, dlam, dz, dmu })
    }

    #[allow(clippy::too_many_arguments)]
    fn conditions(
        &self,
        ev: &Eval,
        x: &[f64],
        z: &[f64],
        lam: &[f64],
        mu: &[f64],
        lx: &[f64],
        f0: f64,
    ) -> (KktResidual, f64) {
        let maxh = ev.h.iter().fold(0.0f64, |m, &v| m.max(v));
        let feasibility = norm_inf(&ev.g).max(maxh);
        let gradient = norm_inf(lx) / (1.0 + norm_inf(lam).max(norm_inf(mu)));
        let complementarity = dot(z, mu) / (1.0 + norm_inf(x));
        let cost = (ev.f - f0).abs() / (1.0 + f0.abs());
        (KktResidual { feasibility, gradient, complementarity }, cost)
    }

    fn finish(
        &self,
        lay: &Layout,
        x: &[f64],
        loads: &LoadScenario,
        lambda: f64,
        iterations: usize,
        kkt: KktResidual,
        start: Instant,
    ) -> OpfSolution {
        let net = self.network;
        let voltages = VoltageState { magnitude: lay.magnitudes(x).to_vec(), angle: lay.angles(x) };
        let p_gen: Vec<f64> = (0..lay.ng).map(|g| x[lay.pg(g)]).collect();
        let q_gen: Vec<f64> = (0..lay.ng).map(|g| x[lay.qg(g)]).collect();
        let objective = net.cost(&p_gen);
        let point = OperatingPoint::assemble(net, voltages, p_gen, q_gen, loads);
        OpfSolution {
            point,
            objective,
            converged: true,
            solve_time: start.elapsed().as_secs_f64(),
            iterations,
            lambda,
            kkt,
        }
    }
}

struct Direction {
    dx: Vec<f64>,
    dlam: Vec<f64>,
    dz: Vec<f64>,
    dmu: Vec<f64>,
}

fn numerical(iteration: usize, e: SingularMatrix) -> OpfError {
    OpfError::Numerical { iteration, reason: e.to_string() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Largest step in [0, inf) keeping `v + t * dv` nonnegative.
fn max_step_raw(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| x / -d)
        .fold(f64::INFINITY, f64::min)
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    max_step_raw(v, dv).min(1.0)
}

fn lay_magnitudes_diverged(vm: &[f64]) -> bool {
    vm.iter().any(|v| !(v.abs() < 10.0))
}

/// No halving of the primal infeasibility over the last `window` iterations.
fn stagnant(history: &[f64], window: usize) -> bool {
    if history.len() <= window {
        return false;
    }
    let recent = &history[history.len() - window..];
    let before = history[history.len() - window - 1];
    recent.iter().all(|&v| v > 0.5 * before)
}

/// Solves the OPF described by `problem`.
pub fn solve_opf(
    problem: &OpfProblem<'_>,
    seed: Option<&OperatingPoint>,
    options: &OpfOptions,
) -> Result<OpfSolution, OpfError> {
    OpfSolver::new(problem.network).solve(&problem.loads, problem.lambda, seed, options)
}

/// Total cost in $/hr of per-unit generator outputs.
pub fn cost(network: &Network, p_gen: &[f64]) -> f64 {
    network.cost(p_gen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    VoltageMin { bus: usize },
    VoltageMax { bus: usize },
    ActiveMin { generator: usize },
    ActiveMax { generator: usize },
    ReactiveMin { generator: usize },
    ReactiveMax { generator: usize },
    ActiveBalance { bus: usize },
    ReactiveBalance { bus: usize },
}

/// A violated constraint with its signed slack (negative means violated;
/// for balances, minus the absolute residual).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    pub constraint: Constraint,
    pub slack: f64,
}

/// Signed slacks of every bound and balance at `point`, against voltage
/// bounds shrunk by `lambda`.
pub fn constraint_slacks(
    network: &Network,
    ybus: &AdmittanceMatrix,
    point: &OperatingPoint,
    lambda: f64,
) -> Vec<ConstraintSlack> {
    let mut out = Vec::new();
    for (i, bus) in network.buses.iter().enumerate() {
        let v = point.voltages.magnitude[i];
        out.push(ConstraintSlack { constraint: Constraint::VoltageMin { bus: i }, slack: v - (bus.v_min + lambda) });
        out.push(ConstraintSlack { constraint: Constraint::VoltageMax { bus: i }, slack: (bus.v_max - lambda) - v });
    }
    for (g, gen) in network.generators.iter().enumerate() {
        let (p, q) = (point.p_gen[g], point.q_gen[g]);
        out.push(ConstraintSlack { constraint: Constraint::ActiveMin { generator: g }, slack: p - gen.p_min });
        out.push(ConstraintSlack { constraint: Constraint::ActiveMax { generator: g }, slack: gen.p_max - p });
        out.push(ConstraintSlack { constraint: Constraint::ReactiveMin { generator: g }, slack: q - gen.q_min });
        out.push(ConstraintSlack { constraint: Constraint::ReactiveMax { generator: g }, slack: gen.q_max - q });
    }
    let h = point.residual(ybus);
    let n = network.n_bus();
    for i in 0..n {
        out.push(ConstraintSlack { constraint: Constraint::ActiveBalance { bus: i }, slack: -h[i].abs() });
        out.push(ConstraintSlack { constraint: Constraint::ReactiveBalance { bus: i }, slack: -h[n + i].abs() });
    }
    out
}

/// Constraints of the `lambda`-restricted problem violated by more than
/// `tol` at `point`. Empty iff the point is feasible to that tolerance.
pub fn check_feasible(network: &Network, point: &OperatingPoint, lambda: f64, tol: f64) -> Vec<ConstraintSlack> {
    let ybus = build_admittance(network);
    constraint_slacks(network, &ybus, point, lambda)
        .into_iter()
        .filter(|c| c.slack < -tol)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::load_builtin;

    fn solve(net: &Network, lambda: f64) -> OpfSolution {
        OpfSolver::new(net)
            .solve(&LoadScenario::base(net), lambda, None, &OpfOptions::default())
            .unwrap()
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let net = load_builtin("case14").unwrap();
        let solver = OpfSolver::new(&net);
        let lay = solver.layout();
        let (ineq, fixed) = solver.bounds(&lay, 0.0).unwrap();
        let (pl, ql) = LoadScenario::base(&net).bus_vectors(&net);
        let mut x = solver.initial_point(&lay, None);
        for (k, v) in x.iter_mut().enumerate() {
            *v += 0.01 * ((k * 7919 % 13) as f64 - 6.0) / 6.0;
        }
        let neq = 2 * net.n_bus() + fixed.len();
        let lam: Vec<f64> = (0..neq).map(|k| ((k * 31 % 11) as f64 - 5.0) / 5.0).collect();
        let mu = vec![0.0; ineq.len()];
        let grad = |x: &[f64]| {
            let ev = solver.evaluate(&lay, x, &pl, &ql, &ineq, &fixed);
            solver.lagrangian_gradient(&ev, &lam, &mu, &ineq, lay.nx())
        };
        let mut hess = Triplets::new(lay.nx());
        solver.lagrangian_hessian(&lay, &x, &lam, &mut hess);
        let hess = hess.to_dense();
        let step = 1e-6;
        for j in 0..lay.nx() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let (gp, gm) = (grad(&xp), grad(&xm));
            for i in 0..lay.nx() {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                let err = (fd - hess[i][j]).abs();
                assert!(err < 1e-5 * (1.0 + fd.abs()), "H[{i}][{j}] = {} vs fd {fd}", hess[i][j]);
            }
        }
    }

    #[test]
    fn equality_jacobian_matches_differences() {
        let net = load_builtin("case14").unwrap();
        let solver = OpfSolver::new(&net);
        let lay = solver.layout();
        let (ineq, fixed) = solver.bounds(&lay, 0.0).unwrap();
        let (pl, ql) = LoadScenario::base(&net).bus_vectors(&net);
        let mut x = solver.initial_point(&lay, None);
        for (k, v) in x.iter_mut().enumerate() {
            *v += 0.02 * ((k * 104729 % 17) as f64 - 8.0) / 8.0;
        }
        let ev = solver.evaluate(&lay, &x, &pl, &ql, &ineq, &fixed);
        let neq = ev.g.len();
        let mut jac = vec![vec![0.0; lay.nx()]; neq];
        for &(r, c, v) in &ev.dg {
            jac[r][c] += v;
        }
        let step = 1e-6;
        for j in 0..lay.nx() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let gp = solver.evaluate(&lay, &xp, &pl, &ql, &ineq, &fixed).g;
            let gm = solver.evaluate(&lay, &xm, &pl, &ql, &ineq, &fixed).g;
            for i in 0..neq {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - jac[i][j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn case14_base_cost() {
        // Reference optimum of the standard 14-bus case without flow limits.
        let net = load_builtin("case14").unwrap();
        let sol = solve(&net, 0.0);
        assert!((sol.objective - 8081.53).abs() / 8081.53 < 1e-4, "{}", sol.objective);
        assert!(check_feasible(&net, &sol.point, 0.0, 1e-7).is_empty());
    }

    #[test]
    fn restricted_solution_is_interior() {
        let net = load_builtin("case14").unwrap();
        let sol = solve(&net, 0.01);
        for (i, bus) in net.buses.iter().enumerate() {
            let v = sol.point.voltages.magnitude[i];
            assert!(v - bus.v_min >= 0.01 - 1e-8 && bus.v_max - v >= 0.01 - 1e-8);
        }
        assert!(check_feasible(&net, &sol.point, 0.01, 1e-7).is_empty());
    }

    #[test]
    fn objective_monotone_in_margin() {
        let net = load_builtin("case14").unwrap();
        let costs: Vec<f64> = [0.0, 0.005, 0.01].iter().map(|&l| solve(&net, l).objective).collect();
        assert!(costs[0] <= costs[1] + 1e-6 && costs[1] <= costs[2] + 1e-6, "{costs:?}");
    }

    #[test]
    fn empty_voltage_box_is_infeasible() {
        let net = load_builtin("case14").unwrap();
        let err = OpfSolver::new(&net)
            .solve(&LoadScenario::base(&net), 0.07, None, &OpfOptions::default())
            .unwrap_err();
        assert!(err.is_infeasible());
    }

    #[test]
    fn excessive_load_is_infeasible() {
        let net = load_builtin("case2").unwrap();
        let loads = LoadScenario { p_load: vec![5.0], q_load: vec![2.0] };
        let err = OpfSolver::new(&net).solve(&loads, 0.0, None, &OpfOptions::default()).unwrap_err();
        assert!(!matches!(err, OpfError::InvalidProblem(_)), "{err:?}");
    }

    #[test]
    fn binding_voltage_flagged_under_margin() {
        let net = load_builtin("case2").unwrap();
        let sol = solve(&net, 0.0);
        // Loss minimisation drives the slack voltage to its upper bound.
        assert!((sol.point.voltages.magnitude[0] - 1.06).abs() < 1e-6);
        let report = check_feasible(&net, &sol.point, 0.01, 1e-7);
        assert!(report
            .iter()
            .any(|c| c.constraint == Constraint::VoltageMax { bus: 0 } && (c.slack + 0.01).abs() < 1e-6));
    }

    #[test]
    fn reactive_violation_reported_with_slack() {
        let net = load_builtin("case2").unwrap();
        let mut sol = solve(&net, 0.0);
        sol.point.q_gen[0] = net.generators[0].q_max + 0.05;
        let report = check_feasible(&net, &sol.point, 0.0, 1e-7);
        let q = report
            .iter()
            .find(|c| c.constraint == Constraint::ReactiveMax { generator: 0 })
            .unwrap();
        assert!((q.slack + 0.05).abs() < 1e-12);
    }

    #[test]
    fn plain_path_following_agrees() {
        let net = load_builtin("case14").unwrap();
        let opts = OpfOptions { predictor_corrector: false, ..Default::default() };
        let a = OpfSolver::new(&net).solve(&LoadScenario::base(&net), 0.0, None, &opts).unwrap();
        let b = solve(&net, 0.0);
        assert!((a.objective - b.objective).abs() < 1e-4);
    }
}
