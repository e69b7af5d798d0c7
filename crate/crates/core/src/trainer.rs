//! Outer loop: meta-batch averaging, SGD with (Nesterov) momentum on
//! `(W₀, Φ, log T)`, checkpoints and meta-test evaluation.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{adapt, AdaptLimits, Horizon};
use crate::embedding::{Activation, EmbeddingParams, Layer};
use crate::error::{Error, ShapeError};
use crate::loss::{accuracy, cross_entropy, ClassifierWeights, LossConfig, Matrix};
use crate::metagrad::{task_metagrads, MetaGradients};
use crate::solver::SolverConfig;
use crate::tasks::{sample_episode, Episode, TaskGenConfig};

/// Everything the outer loop learns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub w0: ClassifierWeights,
    pub embedding: EmbeddingParams,
    pub log_t: f64,
}

impl MetaParams {
    pub fn new(w0: ClassifierWeights, embedding: EmbeddingParams, log_t: f64) -> Self {
        MetaParams { w0, embedding, log_t }
    }

    pub fn t(&self) -> f64 {
        self.log_t.exp()
    }

    pub fn classes(&self) -> usize {
        self.w0.nrows()
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        self.embedding.validate()?;
        if self.w0.ncols() != self.embedding.output_dim() {
            return Err(ShapeError::new(format!(
                "W0 has {} columns but the embedding outputs {}",
                self.w0.ncols(),
                self.embedding.output_dim()
            )));
        }
        if !self.log_t.is_finite() {
            return Err(ShapeError::new("log T is not finite"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w0.len() + self.embedding.num_params() + 1
    }

    /// `W₀` row-major, then the embedding parameters, then `log T`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for r in 0..self.w0.nrows() {
            out.extend(self.w0.row(r).iter());
        }
        out.extend(self.embedding.to_flat());
        out.push(self.log_t);
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), ShapeError> {
        crate::error::expect_dim("flat meta-parameter count", values.len(), self.num_params())?;
        let nw = self.w0.len();
        let d = self.w0.ncols();
        for (k, v) in values[..nw].iter().enumerate() {
            self.w0[(k / d, k % d)] = *v;
        }
        let ne = self.embedding.num_params();
        self.embedding.set_flat(&values[nw..nw + ne])?;
        self.log_t = values[nw + ne];
        Ok(())
    }
}

/// Gradient bundle flattened in the order of [`MetaParams::to_flat`], with
/// the `log T` component last.
pub fn flatten_gradients(g: &MetaGradients) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..g.grad_w0.nrows() {
        out.extend(g.grad_w0.row(r).iter());
    }
    out.extend(g.grad_embedding.to_flat());
    out.push(g.grad_log_t);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub iteration: u64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub meta_batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Multipliers applied cumulatively from each milestone on. When unset,
    /// the rate drops ×0.1 at 60% and again at 85% of the run.
    pub lr_schedule: Option<Vec<Milestone>>,
    pub lambda: f64,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub init_t: f64,
    pub max_horizon: f64,
    /// Widths of the embedding layers after the input; empty means identity.
    pub layers: Vec<usize>,
    pub activation: Activation,
    /// Standard deviation of the random `W₀` initialization.
    pub init_w0_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            meta_batch_size: 4,
            iterations: 2000,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            lr_schedule: None,
            lambda: 0.0,
            solver: SolverConfig::default(),
            seed: 0,
            eval_every: 100,
            checkpoint_path: None,
            init_t: 0.05,
            max_horizon: 100.0,
            layers: Vec::new(),
            activation: Activation::Relu,
            init_w0_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.meta_batch_size == 0 {
            return bad("meta_batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.init_t > 0.0 && self.init_t <= self.max_horizon) {
            return bad(format!("init_t must lie in (0, {}], got {}", self.max_horizon, self.init_t));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.init_w0_std >= 0.0) {
            return bad("init_w0_std must be non-negative".into());
        }
        self.solver.validate()?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig::with_lambda(self.lambda)
    }

    pub fn milestones(&self) -> Vec<Milestone> {
        match &self.lr_schedule {
            Some(m) => m.clone(),
            None => vec![
                Milestone { iteration: self.iterations * 6 / 10, multiplier: 0.1 },
                Milestone { iteration: self.iterations * 85 / 100, multiplier: 0.1 },
            ],
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.milestones().iter().filter(|m| iteration >= m.iteration).fold(self.lr, |lr, m| lr * m.multiplier)
    }

    /// Seeded initial meta-parameters for `way` classes and `input_dim` inputs.
    pub fn init_params(&self, way: usize, input_dim: usize) -> MetaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut dims = vec![input_dim];
        dims.extend(&self.layers);
        let embedding = EmbeddingParams::init(&dims, self.activation, &mut rng);
        let d = embedding.output_dim();
        let w0 = if self.init_w0_std > 0.0 {
            let normal = Normal::new(0.0, self.init_w0_std).expect("valid std");
            Matrix::from_fn(way, d, |_, _| normal.sample(&mut rng))
        } else {
            Matrix::zeros(way, d)
        };
        MetaParams::new(w0, embedding, self.init_t.ln())
    }
}

/// Momentum SGD. With Nesterov the applied step is `g + μ v` after
/// `v ← μ v + g`; without it the step is `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64, nesterov: bool) -> Self {
        Sgd { momentum, nesterov, velocity: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.velocity.len());
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            *v = mu * *v + g;
            let step = if self.nesterov { g + mu * *v } else { *v };
            *p -= lr * step;
        }
    }
}

/// Where meta-training episodes come from. Episode `i` of iteration `k`
/// is index `k·B + i`.
#[derive(Debug, Clone)]
pub enum EpisodeSource {
    Synthetic(TaskGenConfig),
    /// Cycled in order.
    Fixed(Vec<Episode>),
}

impl EpisodeSource {
    pub fn episode(&self, index: u64) -> Result<Episode, Error> {
        match self {
            EpisodeSource::Synthetic(cfg) => {
                cfg.validate().map_err(Error::Invalid)?;
                Ok(sample_episode(cfg, index))
            }
            EpisodeSource::Fixed(list) if list.is_empty() => Err(Error::Invalid("no episodes to train on".into())),
            EpisodeSource::Fixed(list) => Ok(list[(index % list.len() as u64) as usize].clone()),
        }
    }

    /// `(way, input_dim)` of the episodes.
    pub fn dims(&self) -> Result<(usize, usize), Error> {
        let e = self.episode(0)?;
        Ok((e.way, e.input_dim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub outer_loss: f64,
    pub accuracy: f64,
    pub t: f64,
    pub grad_norm_w0: f64,
    pub grad_norm_embedding: f64,
    pub grad_t: f64,
    pub alignment: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,outer_loss,accuracy,t,grad_norm_w0,grad_norm_embedding,grad_t,alignment,wall_time_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.outer_loss,
            self.accuracy,
            self.t,
            self.grad_norm_w0,
            self.grad_norm_embedding,
            self.grad_t,
            self.alignment,
            self.wall_time_s
        )
    }
}

pub fn write_metrics_csv(out: &mut impl Write, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub meta: MetaParams,
    pub sgd: Sgd,
    /// Number of completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, meta: MetaParams) -> Self {
        let sgd = Sgd::new(meta.num_params(), cfg.momentum, cfg.nesterov);
        TrainState { meta, sgd, iteration: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Elementwise mean of the per-task bundles, in task order.
pub fn average_gradients(bundles: &[MetaGradients]) -> Vec<f64> {
    let mut sum = flatten_gradients(&bundles[0]);
    for b in &bundles[1..] {
        for (s, v) in sum.iter_mut().zip(flatten_gradients(b)) {
            *s += v;
        }
    }
    let scale = 1.0 / bundles.len() as f64;
    sum.iter_mut().for_each(|s| *s *= scale);
    sum
}

fn batch_gradients(
    meta: &MetaParams,
    episodes: &[Episode],
    loss: &LossConfig,
    solver: &SolverConfig,
    iteration: u64,
) -> Result<Vec<MetaGradients>, Error> {
    let results: Vec<Result<MetaGradients, Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = episodes
            .iter()
            .map(|e| scope.spawn(move || task_metagrads(meta, e, loss, solver)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("task thread panicked")).collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(task, r)| r.map_err(|e| Error::Task { iteration, task, source: Box::new(e) }))
        .collect()
}

/// Meta-trains from the configured initialization.
pub fn meta_train(cfg: &TrainConfig, source: &EpisodeSource) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    let (way, input_dim) = source.dims()?;
    let state = TrainState::fresh(cfg, cfg.init_params(way, input_dim));
    resume(cfg, source, state)
}

/// Continues training from `state` until `cfg.iterations` are complete.
pub fn resume(cfg: &TrainConfig, source: &EpisodeSource, mut state: TrainState) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    state.meta.validate()?;
    let loss = cfg.loss();
    let log_cap = cfg.max_horizon.ln();
    let started = Instant::now();
    let mut metrics = Vec::new();
    let batch = cfg.meta_batch_size as u64;
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let episodes: Vec<Episode> = (0..batch).map(|b| source.episode(it * batch + b)).collect::<Result<_, _>>()?;
        let bundles = batch_gradients(&state.meta, &episodes, &loss, &cfg.solver, it)?;
        let grad = average_gradients(&bundles);
        let nb = bundles.len() as f64;
        let mean = |f: &dyn Fn(&MetaGradients) -> f64| bundles.iter().map(f).sum::<f64>() / nb;
        let nw = state.meta.w0.len();
        let ne = state.meta.embedding.num_params();
        metrics.push(MetricsRow {
            iteration: it,
            outer_loss: mean(&|g| g.outer_loss),
            accuracy: mean(&|g| g.accuracy),
            t: state.meta.t(),
            grad_norm_w0: grad[..nw].iter().fold(0.0, |acc, v| acc + v * v).sqrt(),
            grad_norm_embedding: grad[nw..nw + ne].iter().fold(0.0, |acc, v| acc + v * v).sqrt(),
            grad_t: mean(&|g| g.grad_t),
            alignment: mean(&|g| g.alignment),
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        let mut flat = state.meta.to_flat();
        state.sgd.step(&mut flat, &grad, cfg.lr_at(it));
        state.meta.set_flat(&flat)?;
        // T stays within the adaptation cap; positivity holds by construction.
        if state.meta.log_t > log_cap {
            state.meta.log_t = log_cap;
        }
        state.iteration += 1;
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 {
                save_state(&state, path).map_err(|e| Error::Invalid(e.to_string()))?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint_path {
        save_state(&state, path).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(TrainOutcome { state, metrics })
}

/// Adapts without sensitivities and scores the test set:
/// `(accuracy, outer loss)`.
pub fn meta_test(
    meta: &MetaParams,
    episode: &Episode,
    cfg: &LossConfig,
    solver: &SolverConfig,
) -> Result<(f64, f64), Error> {
    let (phi_train, _) = meta.embedding.embed_rows(episode.train.features())?;
    let (phi_test, _) = meta.embedding.embed_rows(episode.test.features())?;
    let train = episode.train.with_features(phi_train)?;
    let test = episode.test.with_features(phi_test)?;
    let adapted = adapt(&meta.w0, &train, cfg, Horizon { log_t: meta.log_t }, solver, false, &AdaptLimits::default())?;
    Ok((accuracy(&adapted.w_t, &test)?, cross_entropy(&adapted.w_t, &test)?))
}

/// Mean `(accuracy, outer loss)` over the episodes.
pub fn evaluate(
    meta: &MetaParams,
    episodes: &[Episode],
    cfg: &LossConfig,
    solver: &SolverConfig,
) -> Result<(f64, f64), Error> {
    if episodes.is_empty() {
        return Err(Error::Invalid("no episodes to evaluate".into()));
    }
    let mut acc = 0.0;
    let mut loss = 0.0;
    for e in episodes {
        let (a, l) = meta_test(meta, e, cfg, solver)?;
        acc += a;
        loss += l;
    }
    let n = episodes.len() as f64;
    Ok((acc / n, loss / n))
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const CKPT_MAGIC: &str = "COMLN-CKPT";
const CKPT_VERSION: &str = "1";

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: MetaParams,
    pub iteration: u64,
    /// Optimizer momentum buffer, when saved mid-training.
    pub velocity: Option<Vec<f64>>,
}

fn layers_token(e: &EmbeddingParams) -> String {
    if e.layers.is_empty() {
        return "-".into();
    }
    e.layers
        .iter()
        .map(|l| format!("{}x{}:{}", l.input_dim(), l.output_dim(), l.activation.name()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_checkpoint(out: &mut impl Write, ckpt: &Checkpoint) -> io::Result<()> {
    let meta = &ckpt.meta;
    writeln!(
        out,
        "{CKPT_MAGIC} {CKPT_VERSION} N={} d={} input_dim={} layers={} log_T={} iteration={} velocity={}",
        meta.w0.nrows(),
        meta.w0.ncols(),
        meta.embedding.input_dim,
        layers_token(&meta.embedding),
        meta.log_t,
        ckpt.iteration,
        u8::from(ckpt.velocity.is_some()),
    )?;
    let mut values = meta.to_flat();
    values.pop(); // log T lives in the header
    if let Some(v) = &ckpt.velocity {
        values.extend(v);
    }
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn save_checkpoint(meta: &MetaParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let ckpt = Checkpoint { meta: meta.clone(), iteration: 0, velocity: None };
    write_checkpoint(&mut BufWriter::new(File::create(path)?), &ckpt)?;
    Ok(())
}

/// Saves parameters, iteration count and momentum buffer, enough to resume
/// bit-identically.
pub fn save_state(state: &TrainState, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let ckpt = Checkpoint { meta: state.meta.clone(), iteration: state.iteration, velocity: Some(state.sgd.velocity.clone()) };
    write_checkpoint(&mut BufWriter::new(File::create(path)?), &ckpt)?;
    Ok(())
}

fn parse_layers(token: &str) -> Result<Vec<(usize, usize, Activation)>, CheckpointError> {
    if token == "-" {
        return Ok(Vec::new());
    }
    let corrupt = || CheckpointError::CorruptPayload(format!("bad layer list {token:?}"));
    token
        .split(',')
        .map(|spec| {
            let (dims, act) = spec.split_once(':').ok_or_else(corrupt)?;
            let (a, b) = dims.split_once('x').ok_or_else(corrupt)?;
            let act = Activation::parse(act).ok_or_else(corrupt)?;
            Ok((a.parse().map_err(|_| corrupt())?, b.parse().map_err(|_| corrupt())?, act))
        })
        .collect()
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::CorruptPayload("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| CheckpointError::CorruptPayload("header is not UTF-8".into()))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(CKPT_MAGIC) {
        return Err(CheckpointError::CorruptPayload("missing COMLN-CKPT magic".into()));
    }
    match tokens.next() {
        Some(CKPT_VERSION) => {}
        other => return Err(CheckpointError::VersionMismatch(format!("unsupported version {other:?}"))),
    }
    let mut field = |key: &str| -> Result<String, CheckpointError> {
        let tok = tokens.next().ok_or_else(|| CheckpointError::CorruptPayload(format!("missing {key}")))?;
        let (k, v) = tok.split_once('=').ok_or_else(|| CheckpointError::CorruptPayload(format!("bad field {tok:?}")))?;
        if k != key {
            return Err(CheckpointError::CorruptPayload(format!("expected {key}, found {k}")));
        }
        Ok(v.to_string())
    };
    let num = |s: String, key: &str| -> Result<usize, CheckpointError> {
        s.parse().map_err(|_| CheckpointError::CorruptPayload(format!("{key} is not an integer")))
    };
    let n = num(field("N")?, "N")?;
    let d = num(field("d")?, "d")?;
    let input_dim = num(field("input_dim")?, "input_dim")?;
    let layer_specs = parse_layers(&field("layers")?)?;
    let log_t: f64 =
        field("log_T")?.parse().map_err(|_| CheckpointError::CorruptPayload("log_T is not a number".into()))?;
    let iteration = num(field("iteration")?, "iteration")? as u64;
    let has_velocity = match field("velocity")?.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(CheckpointError::CorruptPayload(format!("bad velocity flag {other}"))),
    };
    if !log_t.is_finite() {
        return Err(CheckpointError::CorruptPayload("log_T is not finite".into()));
    }

    let mut width = input_dim;
    let mut layers = Vec::with_capacity(layer_specs.len());
    for (a, b, act) in layer_specs {
        if a != width {
            return Err(CheckpointError::CorruptPayload("layer widths do not chain".into()));
        }
        layers.push(Layer { weight: Matrix::zeros(b, a), bias: nalgebra::DVector::zeros(b), activation: act });
        width = b;
    }
    if width != d {
        return Err(CheckpointError::CorruptPayload(format!("embedding outputs {width}, header says d={d}")));
    }
    let mut meta = MetaParams::new(Matrix::zeros(n, d), EmbeddingParams { input_dim, layers }, log_t);
    meta.embedding.validate().map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;

    let payload = &bytes[newline + 1..];
    let n_params = meta.num_params() - 1;
    let want = n_params + if has_velocity { meta.num_params() } else { 0 };
    if payload.len() != want * 8 {
        return Err(CheckpointError::CorruptPayload(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            want * 8
        )));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::CorruptPayload("non-finite parameter".into()));
    }
    let mut flat = values[..n_params].to_vec();
    flat.push(log_t);
    meta.set_flat(&flat).map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;
    let velocity = has_velocity.then(|| values[n_params..].to_vec());
    Ok(Checkpoint { meta, iteration, velocity })
}

pub fn load_checkpoint_file(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MetaParams, CheckpointError> {
    Ok(load_checkpoint_file(path)?.meta)
}

/// Loads a checkpoint and checks it was written for `way` classes,
/// embedding width `d` and `input_dim` inputs.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    way: usize,
    d: usize,
    input_dim: usize,
) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint_file(path)?;
    let m = &ckpt.meta;
    if (m.w0.nrows(), m.w0.ncols(), m.embedding.input_dim) != (way, d, input_dim) {
        return Err(CheckpointError::VersionMismatch(format!(
            "checkpoint declares N={} d={} input_dim={}, expected N={way} d={d} input_dim={input_dim}",
            m.w0.nrows(),
            m.w0.ncols(),
            m.embedding.input_dim
        )));
    }
    Ok(ckpt)
}

/// Rebuilds a resumable state from a checkpoint.
pub fn state_from_checkpoint(cfg: &TrainConfig, ckpt: Checkpoint) -> Result<TrainState, Error> {
    let mut sgd = Sgd::new(ckpt.meta.num_params(), cfg.momentum, cfg.nesterov);
    if let Some(v) = ckpt.velocity {
        if v.len() != sgd.velocity.len() {
            return Err(Error::Invalid("momentum buffer length differs from the parameters".into()));
        }
        sgd.velocity = v;
    }
    Ok(TrainState { meta: ckpt.meta, sgd, iteration: ckpt.iteration })
}
