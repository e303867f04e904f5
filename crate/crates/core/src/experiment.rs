//! End-to-end desk experiments for one seed: co-train, train the plain-RNN
//! baseline on the same data, and measure both on one held-out batch.
//!
//! Reports carry raw measurements only; pass/fail thresholds belong to callers.

use crate::analyze::{
    candidates_from_states, find_fixed_points, relative_error_jslds, relative_error_standard, selection_analysis, speed,
    AnalyzeError, FixedPointOptions, FixedPointSet, LinearizationReport, MARGINAL_TOL, MARGINAL_TOL_FULL,
};
use crate::jslds::{co_rollout, rnn_states, CoTrajectory, LossWeights};
use crate::matrix::Matrix;
use crate::tasks::{TaskBatch, TaskKind, TrialMeta};
use crate::train::{holdout_batch, train_run, TrainConfig, TrainError, TrainOutcome};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error("experiment expects the {expected} task, config has {found}")]
    WrongTask { expected: TaskKind, found: TaskKind },
}

impl From<crate::tasks::TaskError> for ExperimentError {
    fn from(e: crate::tasks::TaskError) -> Self {
        ExperimentError::Train(e.into())
    }
}

impl From<crate::diffcore::DiffError> for ExperimentError {
    fn from(e: crate::diffcore::DiffError) -> Self {
        ExperimentError::Analyze(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Held-out trials whose RNN states seed the baseline fixed-point search.
pub const CANDIDATE_TRIALS: usize = 64;
/// Timestep stride for those candidates.
pub const CANDIDATE_STRIDE: usize = 2;
/// Leader-clustering radius for expansion points in 3-bit readout space.
pub const READOUT_CLUSTER_RADIUS: f64 = 0.25;

/// The plain-RNN baseline for `config`: same everything, only the RNN loss.
pub fn baseline_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig { weights: LossWeights::rnn_only(), ..config.clone() }
}

/// Fixed/slow points of `theta` seeded from its own held-out states.
pub fn baseline_fixed_points(theta: &crate::cells::CellParams, holdout: &TaskBatch, opts: &FixedPointOptions) -> Result<FixedPointSet> {
    let states = rnn_states(theta, &holdout.inputs)?;
    let (cands, origin) = candidates_from_states(&states, CANDIDATE_TRIALS, CANDIDATE_STRIDE);
    let u_star: Vec<Vec<f64>> = origin.iter().map(|&b| holdout.u_star.row(b).to_vec()).collect();
    Ok(find_fixed_points(theta, &u_star, &cands, opts)?)
}

/// Relative errors of both methods on the same held-out batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorComparison {
    pub jslds_full_rollout: f64,
    pub standard_one_step: f64,
    pub baseline_fixed_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCluster {
    /// Mean readout of the members.
    pub center: Vec<f64>,
    pub size: usize,
    /// Distance from the center to the nearest corner of `{-1, 1}^3`.
    pub corner_distance: f64,
    pub corner: [i8; 3],
    /// Eigenvalues within [`MARGINAL_TOL`] / [`MARGINAL_TOL_FULL`] of 1 at the representative.
    pub near_one: usize,
    pub near_one_full: usize,
    pub representative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeBitReport {
    pub seed: u64,
    pub accuracy_rnn: f64,
    pub accuracy_jslds: f64,
    pub errors: ErrorComparison,
    /// Clusters sorted by size, largest first.
    pub clusters: Vec<ReadoutCluster>,
}

impl ThreeBitReport {
    /// The eight largest clusters sit on eight distinct corners within `radius`.
    pub fn corners_covered(&self, radius: f64) -> bool {
        if self.clusters.len() < 8 {
            return false;
        }
        let top = &self.clusters[..8];
        let mut corners: Vec<[i8; 3]> = top.iter().map(|c| c.corner).collect();
        corners.sort_unstable();
        corners.dedup();
        corners.len() == 8 && top.iter().all(|c| c.corner_distance <= radius)
    }
}

/// Everything about one trained pair that the criteria look at.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub jslds: TrainOutcome,
    pub baseline: TrainOutcome,
    pub holdout: TaskBatch,
    pub trajectories: Vec<CoTrajectory>,
    pub baseline_fps: FixedPointSet,
    pub errors: ErrorComparison,
}

/// Trains both models for `config` and compares relative errors.
pub fn run_pair(config: &TrainConfig, fp_opts: &FixedPointOptions) -> Result<SeedRun> {
    let jslds = train_run(config)?;
    let baseline = train_run(&baseline_config(config))?;
    let holdout = holdout_batch(config)?;
    let ck = &jslds.checkpoint;
    let trajectories = co_rollout(&ck.theta, &ck.phi, &holdout.inputs, &holdout.u_star)?;
    let baseline_fps = baseline_fixed_points(&baseline.checkpoint.theta, &holdout, fp_opts)?;
    let jslds_err = relative_error_jslds(&ck.theta, &ck.phi, &holdout.inputs, &holdout.u_star)?;
    let standard = if baseline_fps.is_empty() {
        f64::NAN
    } else {
        relative_error_standard(&baseline.checkpoint.theta, &baseline_fps, &holdout.inputs, &holdout.u_star)?.mean
    };
    let errors = ErrorComparison {
        jslds_full_rollout: jslds_err.mean,
        standard_one_step: standard,
        baseline_fixed_points: baseline_fps.len(),
    };
    Ok(SeedRun { jslds, baseline, holdout, trajectories, baseline_fps, errors })
}

fn check_task(config: &TrainConfig, expected: TaskKind) -> Result<()> {
    if config.task == expected {
        Ok(())
    } else {
        Err(ExperimentError::WrongTask { expected, found: config.task })
    }
}

/// Leader clustering: each point joins the first leader within `radius`, else
/// becomes a leader. Returns member indices per cluster, in leader order.
pub fn leader_clusters(points: &[Vec<f64>], radius: f64) -> Vec<Vec<usize>> {
    let mut leaders: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let hit = leaders.iter().position(|&l| {
            points[l].iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= radius
        });
        match hit {
            Some(c) => members[c].push(i),
            None => {
                leaders.push(i);
                members.push(vec![i]);
            }
        }
    }
    members
}

/// 3-bit desk experiment for one seed.
pub fn three_bit(config: &TrainConfig, fp_opts: &FixedPointOptions) -> Result<ThreeBitReport> {
    check_task(config, TaskKind::ThreeBit)?;
    let run = run_pair(config, fp_opts)?;
    let theta = &run.jslds.checkpoint.theta;
    let mut states = Vec::new();
    let mut readouts = Vec::new();
    for tr in &run.trajectories {
        for e in &tr.e_star {
            readouts.push(theta.readout_value(e)?);
            states.push(e.clone());
        }
    }
    let mut clusters = Vec::new();
    for members in leader_clusters(&readouts, READOUT_CLUSTER_RADIUS) {
        let dim = readouts[0].len();
        let center: Vec<f64> = (0..dim).map(|k| members.iter().map(|&i| readouts[i][k]).sum::<f64>() / members.len() as f64).collect();
        let corner: Vec<i8> = center.iter().map(|&c| if c < 0.0 { -1 } else { 1 }).collect();
        let corner_distance = center.iter().zip(&corner).map(|(c, &k)| (c - f64::from(k)).powi(2)).sum::<f64>().sqrt();
        let rep = *members
            .iter()
            .min_by(|&&i, &&j| {
                let di: f64 = readouts[i].iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
                let dj: f64 = readouts[j].iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
                di.total_cmp(&dj)
            })
            .expect("clusters are nonempty");
        clusters.push((members.len(), center, corner, corner_distance, rep));
    }
    clusters.sort_by(|a, b| b.0.cmp(&a.0));
    let u_star = vec![0.0; theta.input_dim];
    let clusters = clusters
        .into_iter()
        .map(|(size, center, corner, corner_distance, rep)| {
            let lin = LinearizationReport::new(theta, &states[rep], &u_star)?;
            Ok(ReadoutCluster {
                center,
                size,
                corner_distance,
                corner: [corner[0], corner[1], corner[2]],
                near_one: lin.count_near_one(MARGINAL_TOL),
                near_one_full: lin.count_near_one(MARGINAL_TOL_FULL),
                representative: states[rep].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThreeBitReport {
        seed: config.seed,
        accuracy_rnn: run.jslds.eval.accuracy_rnn.unwrap_or(f64::NAN),
        accuracy_jslds: run.jslds.eval.accuracy_jslds.unwrap_or(f64::NAN),
        errors: run.errors,
        clusters,
    })
}

/// Spectral and selection measurements at one context's typical expansion point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpectrum {
    pub context: usize,
    /// The expansion point nearest the mean of this context's expansion points.
    pub point: Vec<f64>,
    pub top_eigenvalues: Vec<[f64; 2]>,
    pub near_one: usize,
    pub near_one_full: usize,
    pub second_modulus: f64,
    /// Normalized |top left eigenvector . effective input| for (motion, color).
    pub selection: [f64; 2],
}

impl ContextSpectrum {
    pub fn relevant_selection(&self) -> f64 {
        self.selection[self.context]
    }

    pub fn irrelevant_selection(&self) -> f64 {
        self.selection[1 - self.context]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub seed: u64,
    pub r2_rnn: f64,
    pub r2_jslds: f64,
    pub errors: ErrorComparison,
    /// Mean of `q(e*)` over every held-out expansion point.
    pub mean_speed: f64,
    pub spectra: Vec<ContextSpectrum>,
}

fn context_of(meta: &TrialMeta) -> Option<usize> {
    match meta {
        TrialMeta::Context { context, .. } => Some(*context),
        TrialMeta::ThreeBit { .. } => None,
    }
}

/// Context-integration desk experiment for one seed.
pub fn context(config: &TrainConfig, fp_opts: &FixedPointOptions) -> Result<ContextReport> {
    check_task(config, TaskKind::Context)?;
    let run = run_pair(config, fp_opts)?;
    let theta = &run.jslds.checkpoint.theta;
    let mut total_q = 0.0;
    let mut count = 0usize;
    let mut by_context: [Vec<(Vec<f64>, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
    for (tr, meta) in run.trajectories.iter().zip(&run.holdout.meta) {
        for e in &tr.e_star {
            total_q += speed(theta, e, &tr.u_star)?;
            count += 1;
        }
        if let Some(c) = context_of(meta) {
            by_context[c].extend(tr.e_star.iter().map(|e| (e.clone(), tr.u_star.clone())));
        }
    }
    let mut spectra = Vec::new();
    for (c, points) in by_context.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let d = points[0].0.len();
        let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|(p, _)| p[k]).sum::<f64>() / points.len() as f64).collect();
        let (point, u_star) = points
            .iter()
            .min_by(|a, b| {
                let da: f64 = a.0.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
                let db: f64 = b.0.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("nonempty");
        let lin = LinearizationReport::new(theta, point, u_star)?;
        let probes = Matrix::from_fn(u_star.len(), 2, |r, k| u_star[r] + if r == k { 1.0 } else { 0.0 });
        let sel = selection_analysis(&lin, &probes, 1)?;
        spectra.push(ContextSpectrum {
            context: c,
            point: point.clone(),
            top_eigenvalues: lin.eigenvalues.iter().take(5).map(|z| [z.re, z.im]).collect(),
            near_one: lin.count_near_one(MARGINAL_TOL),
            near_one_full: lin.count_near_one(MARGINAL_TOL_FULL),
            second_modulus: lin.modulus(1).unwrap_or(0.0),
            selection: [sel.get(0, 0).abs(), sel.get(0, 1).abs()],
        });
    }
    Ok(ContextReport {
        seed: config.seed,
        r2_rnn: run.jslds.eval.r2_rnn.unwrap_or(f64::NAN),
        r2_jslds: run.jslds.eval.r2_jslds.unwrap_or(f64::NAN),
        errors: run.errors,
        mean_speed: if count == 0 { f64::NAN } else { total_q / count as f64 },
        spectra,
    })
}
