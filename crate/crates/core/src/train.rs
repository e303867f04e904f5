//! Training driver: Adam, learning-rate schedule, clipping, runs and checkpoints.

use crate::cells::{CellKind, CellParams, ParamSet};
use crate::diffcore::DiffError;
use crate::jslds::{evaluate_loss, gradients, ExpansionParams, LossValues, LossWeights};
use crate::matrix::Matrix;
use crate::rng::{stream, sub_seed, STREAM_DATA, STREAM_HOLDOUT, STREAM_INIT};
use crate::tasks::{generate, r_squared, rounded_accuracy, TaskBatch, TaskError, TaskKind, DEFAULT_T};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String, last_good: Box<Checkpoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub cell: CellKind,
    pub state_dim: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub learning_rate: f64,
    /// Per-iteration multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub lr_floor: f64,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub iterations: usize,
    pub weights: LossWeights,
    /// Coefficient of `sum ||theta||^2` added to the loss.
    pub l2: f64,
    pub seed: u64,
    /// Trials in the held-out evaluation batch.
    pub holdout_trials: usize,
    /// Emit a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Record wall-clock time in the metric log. Off by default so logs are
    /// bit-identical across runs.
    pub record_wallclock: bool,
}

impl TrainConfig {
    /// 3-bit memory at desk scale: GRU, D=64, batch 128, 1500 iterations.
    pub fn desk_three_bit() -> Self {
        TrainConfig {
            task: TaskKind::ThreeBit,
            cell: CellKind::Gru,
            state_dim: 64,
            batch_size: 128,
            timesteps: DEFAULT_T,
            learning_rate: 0.02,
            lr_decay: 0.999,
            lr_floor: 1e-4,
            clip_norm: 10.0,
            iterations: 1500,
            weights: LossWeights::new(3.0, 1.0, 1.0, 1.0),
            l2: 0.0,
            seed: 0,
            holdout_trials: 256,
            checkpoint_every: 0,
            record_wallclock: false,
        }
    }

    /// Context-dependent integration at desk scale: vanilla, D=64, batch 128,
    /// 3000 iterations at a lower learning rate.
    pub fn desk_context() -> Self {
        TrainConfig {
            task: TaskKind::Context,
            cell: CellKind::Vanilla,
            learning_rate: 0.005,
            lr_decay: 0.9995,
            iterations: 3000,
            weights: LossWeights::new(1.0, 1.0, 0.5, 0.005),
            l2: 1e-5,
            ..Self::desk_three_bit()
        }
    }

    /// Table-scale 3-bit configuration (GRU, D=100, batch 256, 20000 iterations)
    /// with the published loss weights and schedule. Not exercised by the tests.
    pub fn full_three_bit() -> Self {
        TrainConfig {
            state_dim: 100,
            batch_size: 256,
            iterations: 20_000,
            lr_decay: 0.9999,
            weights: LossWeights::new(3.0, 1.0, 100.0, 10.0),
            ..Self::desk_three_bit()
        }
    }

    /// Table-scale context configuration (vanilla, D=128, batch 256, 20000 iterations)
    /// with the published loss weights and schedule. Not exercised by the tests.
    pub fn full_context() -> Self {
        TrainConfig {
            task: TaskKind::Context,
            cell: CellKind::Vanilla,
            state_dim: 128,
            weights: LossWeights::new(1.0, 1.0, 100.0, 10.0),
            l2: 1e-5,
            ..Self::full_three_bit()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk_three_bit" => Some(Self::desk_three_bit()),
            "desk_context" => Some(Self::desk_context()),
            "full_three_bit" => Some(Self::full_three_bit()),
            "full_context" => Some(Self::full_context()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["desk_three_bit", "desk_context", "full_three_bit", "full_context"];

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("batch_size", self.batch_size),
            ("timesteps", self.timesteps),
            ("holdout_trials", self.holdout_trials),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            out.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            out.push(format!("lr_floor must be nonnegative, got {}", self.lr_floor));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            out.push(format!("clip_norm must be nonnegative, got {}", self.clip_norm));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            out.push(format!("l2 must be nonnegative, got {}", self.l2));
        }
        if let Err(e) = self.weights.validate() {
            out.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Learning rate used at iteration `k`.
    pub fn lr_at(&self, k: usize) -> f64 {
        (self.learning_rate * self.lr_decay.powi(k as i32)).max(self.lr_floor)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    /// Default Adam hyperparameters with zero moments shaped like `params`.
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update in place.
    pub fn adam_step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<(), String> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(format!("expected {} tensors, got {} params and {} grads", self.m.len(), params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(format!("tensor {i}: shape mismatch"));
            }
            if !g.is_finite() {
                return Err(format!("tensor {i}: non-finite gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = p.as_mut_slice();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a list of gradient tensors.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Number of completed updates.
    pub iteration: usize,
    pub theta: CellParams,
    pub phi: ExpansionParams,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| format!("unreadable checkpoint: {e}"))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.format_version));
        }
        ck.theta.validate()?;
        ck.phi.validate(ck.theta.state_dim)?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub l_rnn: f64,
    pub l_jslds: f64,
    pub r_e: f64,
    pub r_a: f64,
    pub total: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

pub const METRICS_HEADER: &str = "iteration,l_rnn,l_jslds,r_e,r_a,total,lr,wallclock_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.iteration, r.l_rnn, r.l_jslds, r.r_e, r.r_a, r.total, r.lr, r.wallclock_ms
        );
    }
    out
}

/// Held-out evaluation of a trained pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub losses: LossValues,
    /// Sign-rounded accuracy (3-bit) of each stream.
    pub accuracy_rnn: Option<f64>,
    pub accuracy_jslds: Option<f64>,
    /// Pooled R^2 (context) of each stream.
    pub r2_rnn: Option<f64>,
    pub r2_jslds: Option<f64>,
}

/// The held-out batch for a config: drawn from the holdout stream, on the
/// evaluation grid for the context task.
pub fn holdout_batch(config: &TrainConfig) -> Result<TaskBatch, TaskError> {
    generate(config.task, sub_seed(config.seed, STREAM_HOLDOUT, 0), config.holdout_trials, config.timesteps, true)
}

pub fn evaluate(theta: &CellParams, phi: &ExpansionParams, batch: &TaskBatch, weights: &LossWeights) -> Result<EvalMetrics, DiffError> {
    let losses = evaluate_loss(theta, phi, &batch.inputs, &batch.targets, &batch.u_star, weights)?;
    let traj = crate::jslds::co_rollout(theta, phi, &batch.inputs, &batch.u_star)?;
    let stack = |f: &dyn Fn(&crate::jslds::CoTrajectory, usize) -> Vec<f64>| -> Vec<Matrix> {
        (0..batch.timesteps())
            .map(|t| Matrix::from_rows(&traj.iter().map(|tr| f(tr, t)).collect::<Vec<_>>()))
            .collect()
    };
    let rnn = stack(&|tr, t| tr.rnn_out[t].clone());
    let js = stack(&|tr, t| tr.jslds_out[t].clone());
    let (acc, r2) = match batch.task {
        TaskKind::ThreeBit => (true, false),
        TaskKind::Context => (false, true),
    };
    Ok(EvalMetrics {
        losses,
        accuracy_rnn: acc.then(|| rounded_accuracy(&rnn, &batch.targets)),
        accuracy_jslds: acc.then(|| rounded_accuracy(&js, &batch.targets)),
        r2_rnn: r2.then(|| r_squared(&rnn, &batch.targets)),
        r2_jslds: r2.then(|| r_squared(&js, &batch.targets)),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRow>,
    pub eval: EvalMetrics,
}

/// Fresh parameters for `config` drawn from the init stream.
pub fn initialize(config: &TrainConfig) -> (CellParams, ExpansionParams) {
    let mut rng = stream(config.seed, STREAM_INIT);
    let theta = CellParams::init(config.cell, config.state_dim, config.task.input_dim(), config.task.output_dim(), &mut rng);
    let phi = ExpansionParams::init(config.state_dim, &mut rng);
    (theta, phi)
}

/// Loss and gradients (theta tensors then phi tensors) for one batch, L2 included.
pub fn loss_and_grads(
    theta: &CellParams,
    phi: &ExpansionParams,
    batch: &TaskBatch,
    weights: &LossWeights,
    l2: f64,
) -> Result<(LossValues, Vec<Matrix>), DiffError> {
    let (mut values, mut out) = gradients(theta, phi, &batch.inputs, &batch.targets, &batch.u_star, weights)?;
    if l2 > 0.0 {
        values.total += l2 * theta.sum_squares();
        for (g, p) in out.iter_mut().zip(theta.tensors()) {
            for (gi, pi) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *gi += 2.0 * l2 * pi;
            }
        }
    }
    Ok((values, out))
}

/// Training batch for iteration `k`.
pub fn training_batch(config: &TrainConfig, k: usize) -> Result<TaskBatch, TaskError> {
    generate(config.task, sub_seed(config.seed, STREAM_DATA, k as u64), config.batch_size, config.timesteps, false)
}

pub fn train_run(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_run_with(config, None, &mut |_| {})
}

/// Trains from `resume` (or a fresh initialization), calling `on_checkpoint`
/// every `checkpoint_every` iterations.
pub fn train_run_with(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut ck = match resume {
        Some(ck) => ck,
        None => {
            let (theta, phi) = initialize(config);
            let params: Vec<&Matrix> = theta.tensors().into_iter().chain(phi.tensors()).collect();
            let optimizer = OptimizerState::new(&params);
            Checkpoint {
                format_version: CHECKPOINT_VERSION,
                config_hash: config.hash(),
                config: config.clone(),
                iteration: 0,
                theta,
                phi,
                optimizer,
            }
        }
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    let n_theta = ck.theta.tensors().len();
    for k in ck.iteration..config.iterations {
        let batch = training_batch(config, k)?;
        let diverged = |reason: String, ck: &Checkpoint| TrainError::Diverged { iteration: k, reason, last_good: Box::new(ck.clone()) };
        let (values, mut grads) = match loss_and_grads(&ck.theta, &ck.phi, &batch, &config.weights, config.l2) {
            Ok(v) => v,
            Err(DiffError::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"), &ck)),
            Err(e) => return Err(e.into()),
        };
        if !values.total.is_finite() {
            return Err(diverged("non-finite loss".into(), &ck));
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = config.lr_at(k);
        let mut params: Vec<&mut Matrix> = ck.theta.tensors_mut();
        params.extend(ck.phi.tensors_mut());
        if let Err(reason) = ck.optimizer.adam_step(&mut params, &grads, lr) {
            return Err(diverged(reason, &ck));
        }
        debug_assert_eq!(params.len(), n_theta + 4);
        ck.iteration = k + 1;
        log.push(MetricRow {
            iteration: k,
            l_rnn: values.l_rnn,
            l_jslds: values.l_jslds,
            r_e: values.r_e,
            r_a: values.r_a,
            total: values.total,
            lr,
            wallclock_ms: if config.record_wallclock { start.elapsed().as_millis() as u64 } else { 0 },
        });
        if config.checkpoint_every > 0 && ck.iteration % config.checkpoint_every == 0 {
            on_checkpoint(&ck);
        }
    }
    let holdout = holdout_batch(config)?;
    let eval = evaluate(&ck.theta, &ck.phi, &holdout, &config.weights)?;
    Ok(TrainOutcome { checkpoint: ck, log, eval })
}

/// Population mean and standard deviation (`n = 1` gives 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub eval: EvalMetrics,
    pub final_train: Option<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedSummary>,
    pub aggregates: Vec<Aggregate>,
}

/// Named scalar metrics of one run, used for aggregation.
pub fn scalar_metrics(eval: &EvalMetrics) -> Vec<(String, f64)> {
    let mut out = vec![
        ("holdout_total".to_string(), eval.losses.total),
        ("holdout_l_rnn".to_string(), eval.losses.l_rnn),
        ("holdout_l_jslds".to_string(), eval.losses.l_jslds),
        ("holdout_r_e".to_string(), eval.losses.r_e),
        ("holdout_r_a".to_string(), eval.losses.r_a),
    ];
    for (name, v) in [
        ("accuracy_rnn", eval.accuracy_rnn),
        ("accuracy_jslds", eval.accuracy_jslds),
        ("r2_rnn", eval.r2_rnn),
        ("r2_jslds", eval.r2_jslds),
    ] {
        if let Some(v) = v {
            out.push((name.to_string(), v));
        }
    }
    out
}

pub fn aggregate(runs: &[SeedSummary]) -> Vec<Aggregate> {
    let Some(first) = runs.first() else { return Vec::new() };
    scalar_metrics(&first.eval)
        .into_iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let vals: Vec<f64> = runs.iter().map(|r| scalar_metrics(&r.eval)[i].1).collect();
            let (mean, std) = mean_std(&vals);
            Aggregate { name, mean, std }
        })
        .collect()
}

/// Independent runs that differ only in the seed, executed in parallel.
pub fn multi_seed(config: &TrainConfig, seeds: &[u64]) -> Result<(MultiSeedReport, Vec<TrainOutcome>), TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config(vec!["at least one seed is required".into()]));
    }
    let outcomes: Vec<TrainOutcome> = seeds
        .par_iter()
        .map(|&seed| train_run(&TrainConfig { seed, ..config.clone() }))
        .collect::<Result<_, _>>()?;
    let runs: Vec<SeedSummary> = seeds
        .iter()
        .zip(&outcomes)
        .map(|(&seed, o)| SeedSummary { seed, eval: o.eval.clone(), final_train: o.log.last().copied() })
        .collect();
    let aggregates = aggregate(&runs);
    Ok((MultiSeedReport { runs, aggregates }, outcomes))
}
