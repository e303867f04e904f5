//! Seeded generators for the 3-bit memory and context-dependent integration tasks.
//!
//! Batches are stored time-major (`inputs[t]` is `B x U`) because that is the
//! layout the rollout consumes. Every trial is drawn from its own generator
//! seeded by `(seed, trial index)`, so a batch of `n` trials is a prefix of any
//! larger batch drawn with the same seed.

use crate::matrix::Matrix;
use crate::rng::{from_seed, stream, sub_seed};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub const THREE_BIT_INPUTS: usize = 6;
pub const THREE_BIT_OUTPUTS: usize = 3;
pub const CONTEXT_INPUTS: usize = 4;
pub const CONTEXT_OUTPUTS: usize = 1;
pub const DEFAULT_T: usize = 25;

/// Evidence biases used for context-task evaluation batches.
pub const CONTEXT_EVAL_MUS: [f64; 6] = [-0.04, -0.02, -0.009, 0.009, 0.02, 0.04];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ThreeBit,
    Context,
}

impl TaskKind {
    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::ThreeBit => THREE_BIT_INPUTS,
            TaskKind::Context => CONTEXT_INPUTS,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::ThreeBit => THREE_BIT_OUTPUTS,
            TaskKind::Context => CONTEXT_OUTPUTS,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "three_bit" | "3bit" => Ok(TaskKind::ThreeBit),
            "context" => Ok(TaskKind::Context),
            other => Err(format!("unknown task `{other}` (expected three_bit or context)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::ThreeBit => "three_bit",
            TaskKind::Context => "context",
        })
    }
}

/// Per-trial condition labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TrialMeta {
    /// Channel states in {-1, 0, +1} per timestep.
    ThreeBit { states: Vec<[i8; 3]> },
    /// `context` is 0 for motion and 1 for color; `mu` holds the (motion, color) biases.
    Context { context: usize, mu: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub task: TaskKind,
    /// `inputs[t]` is `B x U`.
    pub inputs: Vec<Matrix>,
    /// `targets[t]` is `B x O`.
    pub targets: Vec<Matrix>,
    /// Per-trial expansion input `u*` (`B x U`).
    pub u_star: Matrix,
    pub meta: Vec<TrialMeta>,
}

impl TaskBatch {
    pub fn batch_size(&self) -> usize {
        self.u_star.rows()
    }

    pub fn timesteps(&self) -> usize {
        self.inputs.len()
    }

    /// Input of trial `b` at time `t`.
    pub fn input(&self, b: usize, t: usize) -> &[f64] {
        self.inputs[t].row(b)
    }

    pub fn target(&self, b: usize, t: usize) -> &[f64] {
        self.targets[t].row(b)
    }

    /// Sub-batch made of the given trials, in the given order.
    pub fn select(&self, indices: &[usize]) -> TaskBatch {
        TaskBatch {
            task: self.task,
            inputs: self.inputs.iter().map(|m| m.select_rows(indices)).collect(),
            targets: self.targets.iter().map(|m| m.select_rows(indices)).collect(),
            u_star: self.u_star.select_rows(indices),
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }

    /// CSV export, one row per (trial, timestep), trial-major.
    pub fn to_csv(&self) -> String {
        let u = self.u_star.cols();
        let o = self.targets.first().map_or(self.task.output_dim(), Matrix::cols);
        let mut out = String::from("trial,t");
        for i in 0..u {
            let _ = write!(out, ",u{i}");
        }
        for i in 0..o {
            let _ = write!(out, ",target{i}");
        }
        for i in 0..u {
            let _ = write!(out, ",u_star{i}");
        }
        out.push_str(",context\n");
        for b in 0..self.batch_size() {
            let context = match &self.meta[b] {
                TrialMeta::Context { context, .. } => context.to_string(),
                TrialMeta::ThreeBit { .. } => String::new(),
            };
            for t in 0..self.timesteps() {
                let _ = write!(out, "{b},{t}");
                for v in self.input(b, t).iter().chain(self.target(b, t)).chain(self.u_star.row(b)) {
                    let _ = write!(out, ",{v:.16e}");
                }
                let _ = writeln!(out, ",{context}");
            }
        }
        out
    }
}

fn check_sizes(batch: usize, t: usize) -> Result<(), TaskError> {
    if batch == 0 {
        return Err(TaskError::InvalidSize("batch size must be positive".into()));
    }
    if t == 0 {
        return Err(TaskError::InvalidSize("number of timesteps must be positive".into()));
    }
    Ok(())
}

fn trial_rng(seed: u64, trial: usize) -> rand_chacha::ChaCha8Rng {
    from_seed(sub_seed(seed, "trial", trial as u64))
}

/// Options for the 3-bit generator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreeBitOptions {
    /// When set, each channel is nonzero with this probability per timestep
    /// (sign equally likely) instead of the default iid-uniform states.
    pub pulse_probability: Option<f64>,
}

/// 3-bit memory batch. Inputs encode -1, 0, +1 as `[1,0]`, `[0,0]`, `[0,1]`
/// per channel; the target is the last nonzero state, 0 before any.
pub fn gen_3bit(seed: u64, batch: usize, t_len: usize, opts: ThreeBitOptions) -> Result<TaskBatch, TaskError> {
    check_sizes(batch, t_len)?;
    if let Some(p) = opts.pulse_probability {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TaskError::InvalidOption(format!("pulse probability must be in (0, 1], got {p}")));
        }
    }
    let mut inputs = vec![Matrix::zeros(batch, THREE_BIT_INPUTS); t_len];
    let mut targets = vec![Matrix::zeros(batch, THREE_BIT_OUTPUTS); t_len];
    let mut meta = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut rng = trial_rng(seed, b);
        let mut memory = [0i8; 3];
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut s = [0i8; 3];
            for (c, sc) in s.iter_mut().enumerate() {
                *sc = match opts.pulse_probability {
                    None => rng.random_range(-1i8..=1),
                    Some(p) => {
                        if rng.random::<f64>() < p {
                            if rng.random::<bool>() { 1 } else { -1 }
                        } else {
                            0
                        }
                    }
                };
                match *sc {
                    -1 => inputs[t].set(b, 2 * c, 1.0),
                    1 => inputs[t].set(b, 2 * c + 1, 1.0),
                    _ => {}
                }
                if *sc != 0 {
                    memory[c] = *sc;
                }
                targets[t].set(b, c, f64::from(memory[c]));
            }
            states.push(s);
        }
        meta.push(TrialMeta::ThreeBit { states });
    }
    Ok(TaskBatch {
        task: TaskKind::ThreeBit,
        inputs,
        targets,
        u_star: Matrix::zeros(batch, THREE_BIT_INPUTS),
        meta,
    })
}

/// Options for the context-dependent integration generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextOptions {
    /// Evaluation grid of biases. When set, trials cycle through every
    /// (motion mu, color mu, context) combination in order.
    pub eval_mus: Option<Vec<f64>>,
    pub noise_std: f64,
    pub mu_mean: f64,
    pub mu_std: f64,
}

impl Default for ContextOptions {
    fn default() -> Self {
        ContextOptions { eval_mus: None, noise_std: 0.125, mu_mean: -0.01, mu_std: 0.02 }
    }
}

impl ContextOptions {
    /// Evaluation mode on the standard bias grid.
    pub fn eval() -> Self {
        ContextOptions { eval_mus: Some(CONTEXT_EVAL_MUS.to_vec()), ..Default::default() }
    }
}

/// Context-dependent integration batch. Inputs are
/// `[motion noise, color noise, motion context, color context]`; the target is
/// the running sum of the stream selected by the context.
pub fn gen_context(seed: u64, batch: usize, t_len: usize, opts: &ContextOptions) -> Result<TaskBatch, TaskError> {
    check_sizes(batch, t_len)?;
    if !(opts.noise_std >= 0.0 && opts.noise_std.is_finite()) || !(opts.mu_std >= 0.0 && opts.mu_std.is_finite()) {
        return Err(TaskError::InvalidOption("standard deviations must be finite and nonnegative".into()));
    }
    if let Some(mus) = &opts.eval_mus {
        if mus.is_empty() {
            return Err(TaskError::InvalidOption("eval_mus must not be empty".into()));
        }
    }
    let mu_dist = Normal::new(opts.mu_mean, opts.mu_std).map_err(|e| TaskError::InvalidOption(e.to_string()))?;
    let mut inputs = vec![Matrix::zeros(batch, CONTEXT_INPUTS); t_len];
    let mut targets = vec![Matrix::zeros(batch, CONTEXT_OUTPUTS); t_len];
    let mut u_star = Matrix::zeros(batch, CONTEXT_INPUTS);
    let mut meta = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut rng = trial_rng(seed, b);
        let (context, mu) = match &opts.eval_mus {
            Some(mus) => {
                let k = mus.len();
                let cond = b % (k * k * 2);
                (cond % 2, [mus[cond / 2 / k], mus[(cond / 2) % k]])
            }
            None => {
                let context = rng.random_range(0..2usize);
                (context, [mu_dist.sample(&mut rng), mu_dist.sample(&mut rng)])
            }
        };
        u_star.set(b, 2 + context, 1.0);
        let mut acc = 0.0;
        for t in 0..t_len {
            for (s, &m) in mu.iter().enumerate() {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                inputs[t].set(b, s, m + opts.noise_std * z);
            }
            inputs[t].set(b, 2 + context, 1.0);
            acc += inputs[t].get(b, context);
            targets[t].set(b, 0, acc);
        }
        meta.push(TrialMeta::Context { context, mu });
    }
    Ok(TaskBatch { task: TaskKind::Context, inputs, targets, u_star, meta })
}

/// Generator for either task with its default options.
pub fn generate(task: TaskKind, seed: u64, batch: usize, t_len: usize, eval: bool) -> Result<TaskBatch, TaskError> {
    match task {
        TaskKind::ThreeBit => gen_3bit(seed, batch, t_len, ThreeBitOptions::default()),
        TaskKind::Context => {
            let opts = if eval { ContextOptions::eval() } else { ContextOptions::default() };
            gen_context(seed, batch, t_len, &opts)
        }
    }
}

/// Index split of a batch into `(train, holdout)`, holdout receiving
/// `round(fraction * n)` trials chosen by a seeded shuffle.
pub fn holdout_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TaskError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TaskError::InvalidOption(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let n_hold = (fraction * n as f64).round() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(TaskError::InvalidSize(format!("fraction {fraction} of {n} trials leaves an empty split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, crate::rng::STREAM_HOLDOUT));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((train, hold))
}

pub fn split_holdout(batch: &TaskBatch, fraction: f64, seed: u64) -> Result<(TaskBatch, TaskBatch), TaskError> {
    let (train, hold) = holdout_indices(batch.batch_size(), fraction, seed)?;
    Ok((batch.select(&train), batch.select(&hold)))
}

/// Rounds an output to the nearest of {-1, 0, +1}.
pub fn sign_round(x: f64) -> f64 {
    if x > 0.5 {
        1.0
    } else if x < -0.5 {
        -1.0
    } else {
        0.0
    }
}

/// Fraction of (trial, timestep, channel) entries whose rounded output equals the target.
pub fn rounded_accuracy(outputs: &[Matrix], targets: &[Matrix]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (o, y) in outputs.iter().zip(targets) {
        for (a, b) in o.as_slice().iter().zip(y.as_slice()) {
            total += 1;
            if sign_round(*a) == *b {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Coefficient of determination of `outputs` against `targets`, pooled over all entries.
pub fn r_squared(outputs: &[Matrix], targets: &[Matrix]) -> f64 {
    let ys: Vec<f64> = targets.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let os: Vec<f64> = outputs.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(&os).map(|(y, o)| (y - o).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}
