//! Turns a model prediction into a power-flow-feasible operating point.
//!
//! The decoded set-points fix generator voltages and non-slack active
//! outputs; a power flow then determines the rest. Generators whose reactive
//! output lands outside its limits are pinned to the violated limit and the
//! power flow is solved once more with their buses' voltages left free.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acopf::{constraint_slacks, Constraint, ConstraintSlack};
use crate::case_model::Network;
use crate::nn::{decode_outputs, DecodedSetpoints, MlpModel, NnError, SetpointVector};
use crate::powerflow::{OperatingPoint, PfError, PfOptions, PfSpec, PowerFlow};
use crate::sampling::LoadScenario;

/// Reactive outputs within this distance of a limit count as inside it.
pub const Q_DEADBAND: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// The first power flow respected every reactive limit.
    DirectPF,
    /// Some reactive outputs were clamped and the power flow re-solved.
    ClampedPF,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QClampRecord {
    pub generator: usize,
    /// Reactive output in the power flow that revealed the violation.
    pub q_free: f64,
    pub q_clamped: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTimings {
    pub nn: f64,
    pub pf1: f64,
    pub pf2: f64,
}

impl RecoveryTimings {
    pub fn total(&self) -> f64 {
        self.nn + self.pf1 + self.pf2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub point: OperatingPoint,
    pub stage: Stage,
    pub decoded: DecodedSetpoints,
    /// Reactive outputs after the first power flow, before any clamping.
    pub q_free: Vec<f64>,
    pub clamps: Vec<QClampRecord>,
    pub timings: RecoveryTimings,
    /// Euclidean norm of the power-balance residual at `point`.
    pub residual_norm: f64,
}

impl RecoveryResult {
    /// Generators whose reactive output was clamped.
    pub fn violated_set(&self) -> Vec<usize> {
        self.clamps.iter().map(|c| c.generator).collect()
    }
}

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("model evaluation failed: {0}")]
    Model(#[from] NnError),
    #[error("power flow failed in stage {stage:?}: {source}")]
    PowerFlow { stage: Stage, source: PfError },
}

/// Projection of `q_free` onto `[q_min, q_max]`.
pub fn clamp_q(q_free: f64, q_min: f64, q_max: f64) -> f64 {
    q_max.min(q_free.max(q_min))
}

/// Amount by which each generator's reactive output leaves its limits.
pub fn q_excess(network: &Network, q_gen: &[f64]) -> Vec<f64> {
    network
        .generators
        .iter()
        .zip(q_gen)
        .map(|(g, &q)| (g.q_min - q).max(0.0) + (q - g.q_max).max(0.0))
        .collect()
}

/// Generators whose reactive output is beyond a limit by more than
/// [`Q_DEADBAND`].
pub fn q_violations(network: &Network, q_gen: &[f64]) -> Vec<usize> {
    q_excess(network, q_gen)
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > Q_DEADBAND)
        .map(|(g, _)| g)
        .collect()
}

/// Recovery pipeline for one network and model, reusable across scenarios.
#[derive(Debug, Clone)]
pub struct Recovery<'a> {
    pub network: &'a Network,
    pub model: &'a MlpModel,
    pub pf: PowerFlow<'a>,
    pub options: PfOptions,
    /// Number of clamp-and-resolve rounds. One round follows the two-stage
    /// procedure exactly; further rounds also pin generators that leave
    /// their reactive limits during a re-solve.
    pub clamp_rounds: usize,
}

impl<'a> Recovery<'a> {
    pub fn new(network: &'a Network, model: &'a MlpModel) -> Self {
        Recovery { network, model, pf: PowerFlow::new(network), options: PfOptions::default(), clamp_rounds: 1 }
    }

    pub fn with_clamp_rounds(mut self, rounds: usize) -> Self {
        self.clamp_rounds = rounds.max(1);
        self
    }

    pub fn recover(&self, loads: &LoadScenario) -> Result<RecoveryResult, RecoveryError> {
        let start = Instant::now();
        let y = self.model.forward(&loads.to_features())?;
        let decoded = decode_outputs(&y, self.network);
        let nn = start.elapsed().as_secs_f64();
        let mut result = self.recover_decoded(loads, decoded)?;
        result.timings.nn = nn;
        Ok(result)
    }

    /// Recovery from normalized set-points given directly.
    pub fn recover_setpoints(&self, loads: &LoadScenario, y: &SetpointVector) -> Result<RecoveryResult, RecoveryError> {
        self.recover_decoded(loads, decode_outputs(y, self.network))
    }

    fn recover_decoded(&self, loads: &LoadScenario, decoded: DecodedSetpoints) -> Result<RecoveryResult, RecoveryError> {
        let net = self.network;
        let mut spec = PfSpec::new(loads.clone(), decoded.v_gen.clone(), decoded.p_gen.clone());
        let start = Instant::now();
        let first = self
            .pf
            .solve(&spec, &self.options)
            .map_err(|source| RecoveryError::PowerFlow { stage: Stage::DirectPF, source })?;
        let pf1 = start.elapsed().as_secs_f64();
        let q_free = first.point.q_gen.clone();
        let mut violated = q_violations(net, &q_free);
        if violated.is_empty() {
            let residual_norm = first.point.residual_norm(&self.pf.ybus);
            return Ok(RecoveryResult {
                point: first.point,
                stage: Stage::DirectPF,
                decoded,
                q_free,
                clamps: Vec::new(),
                timings: RecoveryTimings { nn: 0.0, pf1, pf2: 0.0 },
                residual_norm,
            });
        }
        let mut clamps = Vec::new();
        let mut previous = first;
        let mut pf2 = 0.0;
        let mut rounds = 0;
        loop {
            for &g in &violated {
                let gen = &net.generators[g];
                let q = previous.point.q_gen[g];
                clamps.push(QClampRecord { generator: g, q_free: q, q_clamped: clamp_q(q, gen.q_min, gen.q_max) });
            }
            spec.q_fixed = clamps.iter().map(|c| (c.generator, c.q_clamped)).collect::<BTreeMap<_, _>>();
            let options = PfOptions { warm_start: Some(previous.point.voltages.clone()), ..self.options.clone() };
            let start = Instant::now();
            let next = self
                .pf
                .solve_modified(&spec, &options)
                .map_err(|source| RecoveryError::PowerFlow { stage: Stage::ClampedPF, source })?;
            pf2 += start.elapsed().as_secs_f64();
            rounds += 1;
            violated = q_violations(net, &next.point.q_gen)
                .into_iter()
                .filter(|g| !spec.q_fixed.contains_key(g))
                .collect();
            previous = next;
            if violated.is_empty() || rounds >= self.clamp_rounds {
                break;
            }
        }
        let residual_norm = previous.point.residual_norm(&self.pf.ybus);
        Ok(RecoveryResult {
            point: previous.point,
            stage: Stage::ClampedPF,
            decoded,
            q_free,
            clamps,
            timings: RecoveryTimings { nn: 0.0, pf1, pf2 },
            residual_norm,
        })
    }
}

/// Runs the model on `loads` and recovers a feasible operating point.
pub fn recover(network: &Network, model: &MlpModel, loads: &LoadScenario) -> Result<RecoveryResult, RecoveryError> {
    Recovery::new(network, model).recover(loads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Violated limits and balances other than the slack generator's
    /// active-power limits.
    pub violations: Vec<ConstraintSlack>,
    /// Violated active-power limits of the slack generator, which the
    /// recovery does not control.
    pub slack_active: Vec<ConstraintSlack>,
    pub residual_norm: f64,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.slack_active.is_empty()
    }
}

/// Checks every operating limit and power balance at a recovered point.
pub fn verify(network: &Network, point: &OperatingPoint, tol: f64) -> VerificationReport {
    let pf = PowerFlow::new(network);
    let slack = network.slack_generator();
    let (slack_active, violations) = constraint_slacks(network, &pf.ybus, point, 0.0)
        .into_iter()
        .filter(|c| c.slack < -tol)
        .partition(|c| {
            matches!(c.constraint,
                Constraint::ActiveMin { generator } | Constraint::ActiveMax { generator } if Some(generator) == slack)
        });
    VerificationReport { violations, slack_active, residual_norm: point.residual_norm(&pf.ybus) }
}
