//! Learning near-optimal AC optimal-power-flow set-points from load profiles,
//! with feasibility restored by power-flow solves.
//!
//! The pipeline: [`sampling`] draws correlated load scenarios and labels them
//! with restricted OPF solutions from [`acopf`]; [`nn`] fits a sigmoid MLP
//! that maps loads to bounded set-points; [`recovery`] turns a prediction
//! into a feasible operating point with one or two [`powerflow`] solves; and
//! [`eval`] measures speed-up, optimality and feasibility against the OPF
//! baseline.

pub mod acopf;
pub mod case_model;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod powerflow;
pub mod recovery;
pub mod sampling;

pub use acopf::{solve_opf, OpfError, OpfOptions, OpfProblem, OpfSolution, OpfSolver};
pub use case_model::{parse_case, validate, Branch, Bus, BusKind, Generator, Network};
pub use nn::{MlpModel, SetpointVector, TrainConfig};
pub use powerflow::{solve_pf, solve_pf_modified, OperatingPoint, PfOptions, PfSpec, PowerFlow, VoltageState};
pub use recovery::{recover, Recovery, RecoveryResult, Stage};
pub use sampling::{LoadScenario, SamplerConfig, TrainingSample};
