//! Sigmoid multilayer perceptron mapping load profiles to bounded set-points.
//!
//! Outputs live in the unit box and are mapped affinely onto generator
//! active-power and voltage-magnitude limits, so every prediction decodes to
//! set-points that respect those limits whatever the input.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_model::Network;
use crate::powerflow::OperatingPoint;
use crate::sampling::TrainingSample;

/// Normalized set-points: `alpha` for every generator except the slack
/// generator, `beta` for every generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SetpointVector {
    pub fn len(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `alpha ++ beta`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).copied().collect()
    }

    /// Splits a model output of length `2 n_gen - 1`.
    pub fn from_slice(y: &[f64]) -> Self {
        let n_gen = y.len().div_ceil(2);
        SetpointVector { alpha: y[..n_gen - 1].to_vec(), beta: y[n_gen - 1..].to_vec() }
    }
}

/// Set-points for the power flow: voltage magnitude and active output per
/// generator. The slack generator's entry in `p_gen` is its lower limit and
/// is not used by the power flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSetpoints {
    pub v_gen: Vec<f64>,
    pub p_gen: Vec<f64>,
}

fn to_unit(value: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn from_unit(t: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (lo + t * (hi - lo)).clamp(lo, hi)
    } else {
        lo
    }
}

/// Normalizes the set-points of a solved operating point.
pub fn encode_targets(point: &OperatingPoint, network: &Network) -> SetpointVector {
    let alpha = network
        .dispatchable_generators()
        .into_iter()
        .map(|g| {
            let gen = &network.generators[g];
            to_unit(point.p_gen[g], gen.p_min, gen.p_max)
        })
        .collect();
    let beta = network
        .generators
        .iter()
        .map(|gen| {
            let bus = &network.buses[gen.bus];
            to_unit(point.voltages.magnitude[gen.bus], bus.v_min, bus.v_max)
        })
        .collect();
    SetpointVector { alpha, beta }
}

/// Maps normalized set-points back onto generator and bus limits. Components
/// outside `[0, 1]` are clamped onto the limits.
pub fn decode_outputs(y: &SetpointVector, network: &Network) -> DecodedSetpoints {
    let mut p_gen: Vec<f64> = network.generators.iter().map(|g| g.p_min).collect();
    for (&g, &a) in network.dispatchable_generators().iter().zip(&y.alpha) {
        let gen = &network.generators[g];
        p_gen[g] = from_unit(a.clamp(0.0, 1.0), gen.p_min, gen.p_max);
    }
    let v_gen = network
        .generators
        .iter()
        .zip(&y.beta)
        .map(|(gen, &b)| {
            let bus = &network.buses[gen.bus];
            from_unit(b.clamp(0.0, 1.0), bus.v_min, bus.v_max)
        })
        .collect();
    DecodedSetpoints { v_gen, p_gen }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} features, model expects {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("input feature {index} is not finite")]
    NonFiniteInput { index: usize },
    #[error("invalid layer widths {0:?}")]
    Widths(Vec<usize>),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}: validation loss {loss:e} exceeds ten times the initial {initial:e}")]
    Diverged { epoch: usize, loss: f64, initial: f64, report: TrainReport },
    #[error("model file format: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub network: String,
    pub lambda: f64,
    pub seed: u64,
}

/// Fully connected network with sigmoid activations on every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    /// Per layer: row-major weights (`out x in`) followed by biases.
    params: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub meta: ModelMeta,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-layer activations reused across samples.
struct Workspace {
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(widths: &[usize]) -> Self {
        Workspace {
            act: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

impl MlpModel {
    /// Widths `[2L, 2L, 2L, 2G-1, 2G-1]` for `L` loads and `G` generators.
    pub fn architecture(n_load: usize, n_gen: usize) -> Vec<usize> {
        let (n_in, n_out) = (2 * n_load, 2 * n_gen - 1);
        vec![n_in, n_in, n_in, n_out, n_out]
    }

    /// Uniform Glorot initialization, zero biases, identity normalization.
    pub fn new(widths: Vec<usize>, meta: ModelMeta) -> Result<Self, NnError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NnError::Widths(widths));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let mut params = Vec::with_capacity(Self::param_count(&widths));
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            params.extend((0..n_in * n_out).map(|_| rng.gen_range(-bound..=bound)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        let n_in = widths[0];
        Ok(MlpModel { widths, params, input_mean: vec![0.0; n_in], input_scale: vec![1.0; n_in], meta })
    }

    fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        Self::param_count(&self.widths[..=layer])
    }

    fn normalize(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (x[k] - self.input_mean[k]) / self.input_scale[k];
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.n_inputs() {
            return Err(NnError::InputLength { got: x.len(), expected: self.n_inputs() });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput { index });
        }
        Ok(())
    }

    /// Propagates the normalized input already stored in `ws.act[0]`.
    fn propagate(&self, ws: &mut Workspace) {
        let mut off = 0;
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, rest) = self.params[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            let (prev, next) = ws.act.split_at_mut(l + 1);
            let input = &prev[l];
            for (o, out) in next[0].iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z: f64 = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                *out = sigmoid(z);
            }
            off += n_in * n_out + n_out;
        }
    }

    /// Raw model output in the open unit box.
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut ws = Workspace::new(&self.widths);
        self.normalize(x, &mut ws.act[0]);
        self.propagate(&mut ws);
        Ok(ws.act.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<SetpointVector, NnError> {
        Ok(SetpointVector::from_slice(&self.forward_raw(x)?))
    }

    /// Adds the gradient of `scale * ||y - g(x)||^2` to `grad` and returns
    /// the unscaled squared error. `ws.act[0]` holds the normalized input.
    fn backprop(&self, ws: &mut Workspace, y: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        self.propagate(ws);
        let last = self.widths.len() - 1;
        let mut sq = 0.0;
        for (o, d) in ws.delta[last].iter_mut().enumerate() {
            let a = ws.act[last][o];
            let e = a - y[o];
            sq += e * e;
            *d = 2.0 * scale * e * a * (1.0 - a);
        }
        for l in (0..last).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[off..off + n_in * n_out];
            let (lower, upper) = ws.delta.split_at_mut(l + 1);
            let delta = &upper[0];
            let input = &ws.act[l];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                if d != 0.0 {
                    for (g, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l > 0 {
                let back = &mut lower[l];
                back.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let d = delta[o];
                    for (b, wv) in back.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *b += d * wv;
                    }
                }
                for (b, a) in back.iter_mut().zip(input) {
                    *b *= a * (1.0 - a);
                }
            }
        }
        sq
    }

    /// Mean squared error over `(x, y)` pairs (sum over outputs, mean over
    /// samples) and its gradient with respect to [`MlpModel::params`].
    pub fn loss_and_gradient(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Vec<f64>), NnError> {
        let mut grad = vec![0.0; self.params.len()];
        let mut ws = Workspace::new(&self.widths);
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            self.check_input(x)?;
            self.normalize(x, &mut ws.act[0]);
            loss += self.backprop(&mut ws, y, scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    /// Mean squared error over `(x, y)` pairs.
    pub fn loss(&self, batch: &[(&[f64], &[f64])]) -> Result<f64, NnError> {
        let mut total = 0.0;
        for (x, y) in batch {
            let out = self.forward_raw(x)?;
            total += out.iter().zip(*y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of samples held out for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            epochs: 200,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.into()));
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_validation: usize,
    /// Validation loss of the initial parameters.
    pub initial_validation: f64,
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_validation: f64,
    /// Root-mean-square validation error of each output at the returned
    /// parameters.
    pub validation_rmse: Vec<f64>,
    pub seconds: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Fits a model of the standard architecture to `dataset` with Adam on the
/// mean squared error. Inputs are standardized with training-split
/// statistics. Returns the parameters of the epoch with the lowest
/// validation loss (training loss when the validation split is empty).
pub fn train(dataset: &[TrainingSample], config: &TrainConfig, meta: ModelMeta) -> Result<(MlpModel, TrainReport), NnError> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| NnError::Dataset("empty dataset".into()))?;
    let (n_in, n_out) = (first.x.len(), first.y.len());
    if n_in == 0 || n_out == 0 || n_in % 2 != 0 || n_out % 2 != 1 {
        return Err(NnError::Dataset(format!("unsupported dimensions: {n_in} inputs, {n_out} outputs")));
    }
    let ys: Vec<Vec<f64>> = dataset.iter().map(|s| s.y.to_vec()).collect();
    if let Some(s) = dataset.iter().find(|s| s.x.len() != n_in || s.y.len() != n_out) {
        return Err(NnError::Dataset(format!("sample {} has inconsistent dimensions", s.id)));
    }
    let start = std::time::Instant::now();
    let widths = MlpModel::architecture(n_in / 2, n_out.div_ceil(2));
    let mut model = MlpModel::new(widths, ModelMeta { seed: config.seed, ..meta })?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.validation_fraction * dataset.len() as f64).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let nt = train_idx.len() as f64;
    for k in 0..n_in {
        let mean = train_idx.iter().map(|&i| dataset[i].x[k]).sum::<f64>() / nt;
        let var = train_idx.iter().map(|&i| (dataset[i].x[k] - mean).powi(2)).sum::<f64>() / nt;
        model.input_mean[k] = mean;
        model.input_scale[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| {
            let mut z = vec![0.0; n_in];
            model.normalize(&s.x, &mut z);
            z
        })
        .collect();

    let select_idx: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };
    let mut ws = Workspace::new(&model.widths);
    let eval = |model: &MlpModel, ws: &mut Workspace, idx: &[usize]| -> f64 {
        let mut total = 0.0;
        for &i in idx {
            ws.act[0].copy_from_slice(&xs[i]);
            model.propagate(ws);
            total += ws.act.last().unwrap().iter().zip(&ys[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total / idx.len() as f64
    };

    let initial = eval(&model, &mut ws, &select_idx);
    let mut report = TrainReport {
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
        initial_validation: initial,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_validation: initial,
        validation_rmse: Vec::new(),
        seconds: 0.0,
    };
    let mut best = model.params.clone();
    let mut adam = Adam { m: vec![0.0; model.params.len()], v: vec![0.0; model.params.len()], t: 0 };
    let mut grad = vec![0.0; model.params.len()];

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                ws.act[0].copy_from_slice(&xs[i]);
                running += model.backprop(&mut ws, &ys[i], scale, &mut grad);
            }
            adam.step(&mut model.params, &grad, config);
        }
        let train_loss = running / nt;
        let validation = if val_idx.is_empty() { eval(&model, &mut ws, &select_idx) } else { eval(&model, &mut ws, val_idx) };
        report.epochs.push(EpochLoss { epoch, train: train_loss, validation });
        log::debug!("epoch {epoch}: train {train_loss:.3e}, validation {validation:.3e}");
        if !validation.is_finite() || validation > 10.0 * initial.max(f64::MIN_POSITIVE) {
            report.seconds = start.elapsed().as_secs_f64();
            return Err(NnError::Diverged { epoch, loss: validation, initial, report });
        }
        if validation < report.best_validation {
            report.best_validation = validation;
            report.best_epoch = epoch;
            best.copy_from_slice(&model.params);
        }
    }
    model.params = best;

    let mut sq = vec![0.0; n_out];
    for &i in &select_idx {
        ws.act[0].copy_from_slice(&xs[i]);
        model.propagate(&mut ws);
        for (o, (a, b)) in ws.act.last().unwrap().iter().zip(&ys[i]).enumerate() {
            sq[o] += (a - b) * (a - b);
        }
    }
    report.validation_rmse = sq.iter().map(|s| (s / select_idx.len() as f64).sqrt()).collect();
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

const MAGIC: &[u8; 6] = b"OPFMLP";
const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    widths: Vec<usize>,
    meta: ModelMeta,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>, NnError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len != expected {
        return Err(NnError::Format(format!("array of {len} values, expected {expected}")));
    }
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Binary model file: magic, version, JSON header with widths and metadata,
/// then little-endian `f64` arrays for the normalization and the parameters.
pub fn save_model<W: Write>(model: &MlpModel, mut writer: W) -> Result<(), NnError> {
    writer.write_all(MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header { widths: model.widths.clone(), meta: model.meta.clone() })
        .map_err(|e| NnError::Format(e.to_string()))?;
    writer.write_all(&(header.len() as u32).to_le_bytes())?;
    writer.write_all(&header)?;
    write_f64s(&mut writer, &model.input_mean)?;
    write_f64s(&mut writer, &model.input_scale)?;
    write_f64s(&mut writer, &model.params)?;
    writer.flush()?;
    Ok(())
}

pub fn load_model<R: Read>(mut reader: R) -> Result<MlpModel, NnError> {
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|_| NnError::Format("file too short".into()))?;
    if &magic != MAGIC {
        return Err(NnError::Format("not a model file (bad magic)".into()));
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(NnError::Version { found: version, expected: FORMAT_VERSION });
    }
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    reader.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| NnError::Format(e.to_string()))?;
    if header.widths.len() < 2 || header.widths.contains(&0) {
        return Err(NnError::Widths(header.widths));
    }
    let n_in = header.widths[0];
    let input_mean = read_f64s(&mut reader, n_in)?;
    let input_scale = read_f64s(&mut reader, n_in)?;
    let params = read_f64s(&mut reader, MlpModel::param_count(&header.widths))?;
    if params.iter().chain(&input_mean).chain(&input_scale).any(|v| !v.is_finite()) {
        return Err(NnError::Format("non-finite parameter".into()));
    }
    Ok(MlpModel { widths: header.widths, params, input_mean, input_scale, meta: header.meta })
}
