//! Case loading, CSV inputs and operating-point reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use opf_learn::case_model::{builtin_case, parse_case};
use opf_learn::powerflow::AdmittanceMatrix;
use opf_learn::{LoadScenario, Network, OperatingPoint};
use serde::{Deserialize, Serialize};

use crate::manifest::{sha256_hex, FileDigest};

/// A network together with the digest of the text it was parsed from.
pub struct LoadedCase {
    pub network: Network,
    pub digest: FileDigest,
}

/// Resolves `arg` as a built-in case name or a case-file path.
pub fn load_case(arg: &str) -> Result<LoadedCase> {
    if !Path::new(arg).exists() {
        if let Some(text) = builtin_case(arg) {
            let network = parse_case(text).context("case_model")?;
            let digest = FileDigest { path: format!("builtin:{arg}"), sha256: sha256_hex(text.as_bytes()) };
            return Ok(LoadedCase { network, digest });
        }
    }
    let bytes = std::fs::read(arg).with_context(|| format!("case_model: cannot read case file {arg}"))?;
    let text = String::from_utf8(bytes).with_context(|| format!("case_model: {arg} is not UTF-8 text"))?;
    let network = parse_case(&text).with_context(|| format!("case_model: {arg}"))?;
    let digest = FileDigest { path: arg.to_string(), sha256: sha256_hex(text.as_bytes()) };
    Ok(LoadedCase { network, digest })
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

/// Writes through `out` when given, to standard output otherwise.
pub fn emit(out: Option<&PathBuf>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            write(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct LoadRow {
    bus: i64,
    p_mw: f64,
    q_mvar: f64,
}

/// Base demand of `network` with the rows of a `bus,p_mw,q_mvar` file
/// substituted.
pub fn read_loads(network: &Network, path: &Path) -> Result<LoadScenario> {
    let mut loads = LoadScenario::base(network);
    let mut reader = csv::Reader::from_reader(open(path)?);
    for row in reader.deserialize::<LoadRow>() {
        let row = row.with_context(|| format!("loads file {}", path.display()))?;
        let bus = network
            .bus_index(row.bus)
            .with_context(|| format!("loads file {}: unknown bus {}", path.display(), row.bus))?;
        let Some(k) = network.load_set.iter().position(|&b| b == bus) else {
            bail!("loads file {}: bus {} carries no base demand and is not a load bus", path.display(), row.bus);
        };
        loads.p_load[k] = row.p_mw / network.base_mva;
        loads.q_load[k] = row.q_mvar / network.base_mva;
    }
    Ok(loads)
}

#[derive(Debug, Deserialize)]
struct SetpointRow {
    gen: usize,
    vm_pu: f64,
    pg_mw: f64,
}

/// Voltage and active set-points from a `gen,vm_pu,pg_mw` file, starting from
/// the values in the case.
pub fn read_setpoints(network: &Network, path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v: Vec<f64> = network.generators.iter().map(|g| g.v_set).collect();
    let mut p: Vec<f64> = network.generators.iter().map(|g| g.p_set).collect();
    let mut reader = csv::Reader::from_reader(open(path)?);
    for row in reader.deserialize::<SetpointRow>() {
        let row = row.with_context(|| format!("set-point file {}", path.display()))?;
        if row.gen >= network.n_gen() {
            bail!("set-point file {}: generator {} does not exist", path.display(), row.gen);
        }
        v[row.gen] = row.vm_pu;
        p[row.gen] = row.pg_mw / network.base_mva;
    }
    Ok((v, p))
}

#[derive(Debug, Deserialize)]
struct QFixedRow {
    gen: usize,
    q_mvar: f64,
}

/// Pinned reactive outputs from a `gen,q_mvar` file.
pub fn read_qfixed(network: &Network, path: &Path) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    let mut reader = csv::Reader::from_reader(open(path)?);
    for row in reader.deserialize::<QFixedRow>() {
        let row = row.with_context(|| format!("fixed-Q file {}", path.display()))?;
        if row.gen >= network.n_gen() {
            bail!("fixed-Q file {}: generator {} does not exist", path.display(), row.gen);
        }
        out.insert(row.gen, row.q_mvar / network.base_mva);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct BusRow {
    pub bus: i64,
    pub vm_pu: f64,
    pub va_deg: f64,
    pub p_gen_mw: f64,
    pub q_gen_mvar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenRow {
    pub gen: usize,
    pub bus: i64,
    pub p_mw: f64,
    pub q_mvar: f64,
}

/// An operating point in physical units.
#[derive(Debug, Clone, Serialize)]
pub struct PointReport {
    pub cost: f64,
    pub residual_norm: f64,
    pub buses: Vec<BusRow>,
    pub generators: Vec<GenRow>,
}

impl PointReport {
    pub fn new(network: &Network, ybus: &AdmittanceMatrix, point: &OperatingPoint) -> Self {
        let base = network.base_mva;
        let mut p_bus = vec![0.0; network.n_bus()];
        let mut q_bus = vec![0.0; network.n_bus()];
        for (g, gen) in network.generators.iter().enumerate() {
            p_bus[gen.bus] += point.p_gen[g];
            q_bus[gen.bus] += point.q_gen[g];
        }
        let buses = network
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| BusRow {
                bus: b.id,
                vm_pu: point.voltages.magnitude[i],
                va_deg: point.voltages.angle[i].to_degrees(),
                p_gen_mw: p_bus[i] * base,
                q_gen_mvar: q_bus[i] * base,
            })
            .collect();
        let generators = network
            .generators
            .iter()
            .enumerate()
            .map(|(g, gen)| GenRow {
                gen: g,
                bus: network.buses[gen.bus].id,
                p_mw: point.p_gen[g] * base,
                q_mvar: point.q_gen[g] * base,
            })
            .collect();
        PointReport { cost: network.cost(&point.p_gen), residual_norm: point.residual_norm(ybus), buses, generators }
    }

    /// One row per bus: `bus,vm_pu,va_deg,p_gen_mw,q_gen_mvar`.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for row in &self.buses {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}
