//! Network data model and a parser for the MATPOWER case-file subset used by
//! the toolkit (bus, gen, branch and polynomial gencost matrices).
//!
//! Every electrical quantity in a [`Network`] is stored in per-unit on the
//! system MVA base. Generator cost coefficients stay in their physical form
//! ($/hr as a function of MW).

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker line written by [`to_case_string`]; when present, the numeric
/// columns are already per-unit and phase shifts are in radians.
const NORMALIZED_MARKER: &str = "opf_learn_normalized";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl BusKind {
    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 => Some(BusKind::Pq),
            2 => Some(BusKind::Pv),
            3 => Some(BusKind::Slack),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Label from the case file.
    pub id: i64,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.p_load != 0.0 || self.q_load != 0.0
    }
}

/// Polynomial generation cost `c2 * P^2 + c1 * P + c0` with `P` in MW.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p_mw: f64) -> f64 {
        (self.c2 * p_mw + self.c1) * p_mw + self.c0
    }

    /// d cost / d P, per MW.
    pub fn slope(&self, p_mw: f64) -> f64 {
        2.0 * self.c2 * p_mw + self.c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// Dense bus index.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Dispatch and voltage set-point carried by the case file.
    pub p_set: f64,
    pub v_set: f64,
    pub cost: CostCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_charge: f64,
    pub tap_ratio: f64,
    /// Radians.
    pub phase_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    /// Index of the (first) slack bus.
    pub slack_index: usize,
    /// Buses with nonzero base demand, ascending.
    pub load_set: Vec<usize>,
    /// Buses hosting at least one generator, ascending.
    pub gen_set: Vec<usize>,
}

impl Network {
    /// Assembles a network and derives the index sets. The slack bus is the
    /// first bus of kind [`BusKind::Slack`].
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
    ) -> Result<Self, CaseError> {
        if !(base_mva > 0.0) || !base_mva.is_finite() {
            return Err(CaseError::BaseMva(base_mva));
        }
        let slack_index = buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .ok_or(CaseError::NoSlack)?;
        let load_set = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.has_load())
            .map(|(i, _)| i)
            .collect();
        let mut gen_set: Vec<usize> = generators.iter().map(|g| g.bus).collect();
        gen_set.sort_unstable();
        gen_set.dedup();
        Ok(Network {
            name: name.into(),
            base_mva,
            buses,
            generators,
            branches,
            slack_index,
            load_set,
            gen_set,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_load(&self) -> usize {
        self.load_set.len()
    }

    /// The generator that absorbs the active-power balance: the first
    /// generator connected to the slack bus.
    pub fn slack_generator(&self) -> Option<usize> {
        self.generators.iter().position(|g| g.bus == self.slack_index)
    }

    /// Generators other than the slack generator, in list order.
    pub fn dispatchable_generators(&self) -> Vec<usize> {
        let slack = self.slack_generator();
        (0..self.n_gen()).filter(|&g| Some(g) != slack).collect()
    }

    /// Generator indices grouped by host bus.
    pub fn generators_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.n_bus()];
        for (g, gen) in self.generators.iter().enumerate() {
            at[gen.bus].push(g);
        }
        at
    }

    /// Total generation cost in $/hr for per-unit outputs `p_gen`.
    pub fn cost(&self, p_gen: &[f64]) -> f64 {
        self.generators
            .iter()
            .zip(p_gen)
            .map(|(g, &p)| g.cost.eval(p * self.base_mva))
            .sum()
    }

    /// Base active and reactive demand over the load set.
    pub fn base_loads(&self) -> (Vec<f64>, Vec<f64>) {
        self.load_set
            .iter()
            .map(|&i| (self.buses[i].p_load, self.buses[i].q_load))
            .unzip()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Adjacency lists over in-service branches.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_bus()];
        for br in &self.branches {
            if br.from_bus < self.n_bus() && br.to_bus < self.n_bus() {
                adj[br.from_bus].push(br.to_bus);
                adj[br.to_bus].push(br.from_bus);
            }
        }
        adj
    }

    /// Hop distances from `source` over the branch graph (`usize::MAX` when
    /// unreachable).
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut dist = vec![usize::MAX; self.n_bus()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("base MVA must be positive, got {0}")]
    BaseMva(f64),
    #[error("no slack bus (type 3) in bus table")]
    NoSlack,
    #[error("duplicate bus id {id} (line {line})")]
    DuplicateBus { id: i64, line: usize },
    #[error("missing `mpc.{0}` table")]
    MissingTable(&'static str),
    #[error("line {line}: unsupported cost model: {message}")]
    UnsupportedCost { line: usize, message: String },
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    NonPositiveVmin { bus: i64, v_min: f64 },
    VoltageBoundOrder { bus: i64, v_min: f64, v_max: f64 },
    SlackCount { count: usize },
    NoGenerators,
    GeneratorBusMissing { generator: usize, bus: usize },
    ActiveBoundOrder { generator: usize },
    ReactiveBoundOrder { generator: usize },
    ZeroImpedance { branch: usize },
    SelfLoop { branch: usize },
    BranchBusMissing { branch: usize },
    Disconnected { unreachable: Vec<i64> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveVmin { bus, v_min } => {
                write!(f, "bus {bus}: v_min = {v_min} is not positive")
            }
            Violation::VoltageBoundOrder { bus, v_min, v_max } => {
                write!(f, "bus {bus}: v_min = {v_min} exceeds v_max = {v_max}")
            }
            Violation::SlackCount { count } => write!(f, "expected one slack bus, found {count}"),
            Violation::NoGenerators => write!(f, "network has no in-service generators"),
            Violation::GeneratorBusMissing { generator, bus } => {
                write!(f, "generator {generator}: bus index {bus} does not exist")
            }
            Violation::ActiveBoundOrder { generator } => {
                write!(f, "generator {generator}: p_min exceeds p_max")
            }
            Violation::ReactiveBoundOrder { generator } => {
                write!(f, "generator {generator}: q_min exceeds q_max")
            }
            Violation::ZeroImpedance { branch } => write!(f, "branch {branch}: zero impedance"),
            Violation::SelfLoop { branch } => write!(f, "branch {branch}: from and to bus coincide"),
            Violation::BranchBusMissing { branch } => {
                write!(f, "branch {branch}: endpoint does not exist")
            }
            Violation::Disconnected { unreachable } => {
                write!(f, "buses unreachable from slack: {unreachable:?}")
            }
        }
    }
}

/// Checks every structural invariant of the data model. An empty result
/// means the network is usable by the solvers.
pub fn validate(network: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = network.n_bus();
    for bus in &network.buses {
        if !(bus.v_min > 0.0) {
            out.push(Violation::NonPositiveVmin { bus: bus.id, v_min: bus.v_min });
        }
        if bus.v_min > bus.v_max {
            out.push(Violation::VoltageBoundOrder {
                bus: bus.id,
                v_min: bus.v_min,
                v_max: bus.v_max,
            });
        }
    }
    let slack_count = network.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slack_count != 1 {
        out.push(Violation::SlackCount { count: slack_count });
    }
    if network.generators.is_empty() {
        out.push(Violation::NoGenerators);
    }
    for (g, gen) in network.generators.iter().enumerate() {
        if gen.bus >= n {
            out.push(Violation::GeneratorBusMissing { generator: g, bus: gen.bus });
        }
        if gen.p_min > gen.p_max {
            out.push(Violation::ActiveBoundOrder { generator: g });
        }
        if gen.q_min > gen.q_max {
            out.push(Violation::ReactiveBoundOrder { generator: g });
        }
    }
    for (k, br) in network.branches.iter().enumerate() {
        if br.r * br.r + br.x * br.x <= 0.0 {
            out.push(Violation::ZeroImpedance { branch: k });
        }
        if br.from_bus == br.to_bus {
            out.push(Violation::SelfLoop { branch: k });
        }
        if br.from_bus >= n || br.to_bus >= n {
            out.push(Violation::BranchBusMissing { branch: k });
        }
    }
    if network.slack_index < n {
        let dist = network.hop_distances(network.slack_index);
        let unreachable: Vec<i64> = dist
            .iter()
            .zip(&network.buses)
            .filter(|(d, _)| **d == usize::MAX)
            .map(|(_, b)| b.id)
            .collect();
        if !unreachable.is_empty() {
            out.push(Violation::Disconnected { unreachable });
        }
    }
    out
}

type Row = (usize, Vec<f64>);

#[derive(Default)]
struct RawCase {
    name: String,
    base_mva: Option<(usize, f64)>,
    normalized: bool,
    tables: HashMap<String, Vec<Row>>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_row(chunk: &str, line: usize) -> Result<Option<Row>, CaseError> {
    let fields: Vec<&str> = chunk
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect();
    if fields.is_empty() {
        return Ok(None);
    }
    let values = fields
        .iter()
        .map(|f| {
            let v = match *f {
                "Inf" | "inf" => f64::INFINITY,
                "-Inf" | "-inf" => f64::NEG_INFINITY,
                _ => f.parse::<f64>().map_err(|_| CaseError::Malformed {
                    line,
                    message: format!("cannot parse number `{f}`"),
                })?,
            };
            Ok(v)
        })
        .collect::<Result<Vec<f64>, CaseError>>()?;
    Ok(Some((line, values)))
}

fn scan(text: &str) -> Result<RawCase, CaseError> {
    let mut raw = RawCase::default();
    let mut open: Option<String> = None;
    for (idx, full) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut line = strip_comment(full).trim();
        if line.is_empty() {
            continue;
        }
        if open.is_none() {
            if let Some(rest) = line.strip_prefix("function") {
                if let Some(eq) = rest.find('=') {
                    raw.name = rest[eq + 1..].trim().trim_end_matches(';').to_string();
                }
                continue;
            }
            let Some(rest) = line.strip_prefix("mpc.") else {
                return Err(CaseError::Malformed {
                    line: line_no,
                    message: format!("unexpected statement `{line}`"),
                });
            };
            let Some(eq) = rest.find('=') else {
                return Err(CaseError::Malformed {
                    line: line_no,
                    message: "expected `=`".into(),
                });
            };
            let key = rest[..eq].trim().to_string();
            let value = rest[eq + 1..].trim();
            if let Some(body) = value.strip_prefix('[') {
                raw.tables.insert(key.clone(), Vec::new());
                open = Some(key);
                line = body;
            } else {
                let value = value.trim_end_matches(';').trim();
                match key.as_str() {
                    "baseMVA" => {
                        let v = value.parse::<f64>().map_err(|_| CaseError::Malformed {
                            line: line_no,
                            message: format!("cannot parse baseMVA `{value}`"),
                        })?;
                        raw.base_mva = Some((line_no, v));
                    }
                    k if k == NORMALIZED_MARKER => raw.normalized = value == "1",
                    _ => {}
                }
                continue;
            }
        }
        let key = open.clone().expect("table is open");
        let (body, closes) = match line.find(']') {
            Some(i) => (&line[..i], true),
            None => (line, false),
        };
        for chunk in body.split(';') {
            if let Some(row) = parse_row(chunk, line_no)? {
                raw.tables.get_mut(&key).expect("table exists").push(row);
            }
        }
        if closes {
            open = None;
        }
    }
    if let Some(key) = open {
        return Err(CaseError::Malformed {
            line: text.lines().count(),
            message: format!("unterminated matrix `mpc.{key}`"),
        });
    }
    Ok(raw)
}

fn require_cols(row: &Row, n: usize, table: &str) -> Result<(), CaseError> {
    if row.1.len() < n {
        return Err(CaseError::Malformed {
            line: row.0,
            message: format!("{table} row has {} columns, expected at least {n}", row.1.len()),
        });
    }
    Ok(())
}

/// Parses a MATPOWER-style case file into a per-unit [`Network`].
///
/// Out-of-service generators and branches are dropped. Only polynomial
/// costs of degree two or less are accepted.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let mut raw = scan(text)?;
    let (base_line, base_mva) = raw.base_mva.ok_or(CaseError::MissingTable("baseMVA"))?;
    if !(base_mva > 0.0) || !base_mva.is_finite() {
        let _ = base_line;
        return Err(CaseError::BaseMva(base_mva));
    }
    let scale = if raw.normalized { 1.0 } else { base_mva };
    let to_rad = if raw.normalized { 1.0 } else { PI / 180.0 };
    let mut take = |name: &'static str| raw.tables.remove(name).ok_or(CaseError::MissingTable(name));
    let bus_rows = take("bus")?;
    let gen_rows = take("gen")?;
    let branch_rows = take("branch")?;
    let cost_rows = take("gencost")?;

    let mut index_of: HashMap<i64, usize> = HashMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        require_cols(row, 13, "bus")?;
        let c = &row.1;
        let id = c[0] as i64;
        if c[0].fract() != 0.0 {
            return Err(CaseError::Malformed { line: row.0, message: "bus id must be an integer".into() });
        }
        let kind = BusKind::from_code(c[1]).ok_or_else(|| CaseError::Malformed {
            line: row.0,
            message: format!("unsupported bus type {}", c[1]),
        })?;
        if index_of.insert(id, buses.len()).is_some() {
            return Err(CaseError::DuplicateBus { id, line: row.0 });
        }
        buses.push(Bus {
            id,
            kind,
            p_load: c[2] / scale,
            q_load: c[3] / scale,
            g_shunt: c[4] / scale,
            b_shunt: c[5] / scale,
            v_max: c[11],
            v_min: c[12],
        });
    }
    if !buses.iter().any(|b| b.kind == BusKind::Slack) {
        return Err(CaseError::NoSlack);
    }
    let lookup = |id: f64, line: usize| {
        index_of.get(&(id as i64)).copied().ok_or_else(|| CaseError::Malformed {
            line,
            message: format!("reference to unknown bus {id}"),
        })
    };

    if cost_rows.len() < gen_rows.len() {
        return Err(CaseError::Malformed {
            line: cost_rows.last().map_or(0, |r| r.0),
            message: format!("gencost has {} rows for {} generators", cost_rows.len(), gen_rows.len()),
        });
    }
    let mut generators = Vec::new();
    for (row, cost_row) in gen_rows.iter().zip(&cost_rows) {
        require_cols(row, 10, "gen")?;
        let c = &row.1;
        let bus = lookup(c[0], row.0)?;
        let cost = parse_cost(cost_row)?;
        if c[7] <= 0.0 {
            continue;
        }
        generators.push(Generator {
            bus,
            p_set: c[1] / scale,
            q_max: c[3] / scale,
            q_min: c[4] / scale,
            v_set: c[5],
            p_max: c[8] / scale,
            p_min: c[9] / scale,
            cost,
        });
    }

    let mut branches = Vec::new();
    for row in &branch_rows {
        require_cols(row, 11, "branch")?;
        let c = &row.1;
        if c[10] <= 0.0 {
            continue;
        }
        branches.push(Branch {
            from_bus: lookup(c[0], row.0)?,
            to_bus: lookup(c[1], row.0)?,
            r: c[2],
            x: c[3],
            b_charge: c[4],
            tap_ratio: if c[8] == 0.0 { 1.0 } else { c[8] },
            phase_shift: c[9] * to_rad,
        });
    }
    let name = if raw.name.is_empty() { "case".to_string() } else { raw.name.clone() };
    Network::new(name, base_mva, buses, generators, branches)
}

fn parse_cost(row: &Row) -> Result<CostCurve, CaseError> {
    require_cols(row, 4, "gencost")?;
    let c = &row.1;
    if c[0] != 2.0 {
        return Err(CaseError::UnsupportedCost {
            line: row.0,
            message: format!("model {} (only polynomial model 2 is supported)", c[0]),
        });
    }
    let n = c[3];
    if n.fract() != 0.0 || !(0.0..=3.0).contains(&n) {
        return Err(CaseError::UnsupportedCost {
            line: row.0,
            message: format!("{n} coefficients (polynomial degree must be at most 2)"),
        });
    }
    let n = n as usize;
    if c.len() < 4 + n {
        return Err(CaseError::Malformed {
            line: row.0,
            message: format!("gencost row declares {n} coefficients but has {}", c.len() - 4),
        });
    }
    // Highest order first.
    let mut coeffs = [0.0; 3];
    for (k, &v) in c[4..4 + n].iter().rev().enumerate() {
        coeffs[k] = v;
    }
    Ok(CostCurve { c0: coeffs[0], c1: coeffs[1], c2: coeffs[2] })
}

/// Canonical text form of a network. The output is a valid case file that
/// [`parse_case`] reads back into an identical [`Network`].
pub fn to_case_string(network: &Network) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {}", network.name);
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {:?};", network.base_mva);
    let _ = writeln!(s, "% quantities below are per-unit, phase shifts in radians");
    let _ = writeln!(s, "mpc.{NORMALIZED_MARKER} = 1;");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &network.buses {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t1\t1\t0\t0\t1\t{:?}\t{:?};",
            b.id,
            b.kind.code(),
            b.p_load,
            b.q_load,
            b.g_shunt,
            b.b_shunt,
            b.v_max,
            b.v_min
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gen = [");
    for g in &network.generators {
        let _ = writeln!(
            s,
            "\t{}\t{:?}\t0\t{:?}\t{:?}\t{:?}\t{:?}\t1\t{:?}\t{:?};",
            network.buses[g.bus].id,
            g.p_set,
            g.q_max,
            g.q_min,
            g.v_set,
            network.base_mva,
            g.p_max,
            g.p_min
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.branch = [");
    for br in &network.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{:?}\t{:?}\t{:?}\t0\t0\t0\t{:?}\t{:?}\t1\t-360\t360;",
            network.buses[br.from_bus].id,
            network.buses[br.to_bus].id,
            br.r,
            br.x,
            br.b_charge,
            br.tap_ratio,
            br.phase_shift
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gencost = [");
    for g in &network.generators {
        let _ = writeln!(s, "\t2\t0\t0\t3\t{:?}\t{:?}\t{:?};", g.cost.c2, g.cost.c1, g.cost.c0);
    }
    let _ = writeln!(s, "];");
    s
}

/// Case files shipped with the crate, addressable by name.
pub fn builtin_case(name: &str) -> Option<&'static str> {
    Some(match name {
        "case2" => include_str!("../cases/case2.m"),
        "case3" => include_str!("../cases/case3.m"),
        "case14" => include_str!("../cases/case14.m"),
        "case39" => include_str!("../cases/case39.m"),
        "case57" => include_str!("../cases/case57.m"),
        "case118" => include_str!("../cases/case118.m"),
        _ => return None,
    })
}

/// Loads a built-in case by name, panicking on parse failure (the shipped
/// files are known-good).
pub fn load_builtin(name: &str) -> Option<Network> {
    builtin_case(name).map(|t| parse_case(t).expect("built-in case parses"))
}
