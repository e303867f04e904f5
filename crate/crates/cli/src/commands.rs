use crate::config::{self, Overrides};
use crate::manifest::{OutDir, RunManifest, MANIFEST_FILE};
use jslds_core::analyze::{
    build_choice_subspace, complex_pair, input_axes, pca_project, project, relative_error_jslds, relative_error_jslds_one_step,
    relative_error_standard, selection_analysis, AnalyzeError, FixedPointOptions, FixedPointSet, LinearizationReport,
    MARGINAL_TOL, MARGINAL_TOL_FULL, MERGE_RADIUS,
};
use jslds_core::diffcore::DiffError;
use jslds_core::experiment::{baseline_fixed_points, leader_clusters, ExperimentError};
use jslds_core::jslds::{co_rollout, rnn_states};
use jslds_core::linalg::EigError;
use jslds_core::matrix::Matrix;
use jslds_core::tasks::{TaskBatch, TaskKind, TrialMeta};
use jslds_core::train::{holdout_batch, mean_std, metrics_csv, multi_seed, train_run_with, Checkpoint, TrainConfig, TrainError};
use serde_json::json;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    /// 1 for usage, config and I/O problems, 2 for numerical aborts.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(v) => CliError::Config(v),
            TrainError::Diff(d) => d.into(),
            TrainError::Task(t) => CliError::Config(vec![t.to_string()]),
            d @ TrainError::Diverged { .. } => CliError::Numerical(d.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<AnalyzeError> for CliError {
    fn from(e: AnalyzeError) -> Self {
        match e {
            AnalyzeError::Diff(d) => d.into(),
            AnalyzeError::Eig(EigError::NotSquare(..)) => CliError::Usage(e.to_string()),
            AnalyzeError::Eig(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Analyze(a) => a.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Per-command progress messages on stderr, silenced by `--quiet`.
#[derive(Debug, Clone, Copy)]
pub struct Ui {
    pub quiet: bool,
}

impl Ui {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn absolute(p: &Path) -> Result<String> {
    let abs = fs::canonicalize(p).map_err(io_err(format!("cannot resolve {}", p.display())))?;
    Ok(abs.to_string_lossy().into_owned())
}

pub fn read_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(io_err(format!("cannot read config {}", path.display())))?;
    config::parse(&text, overrides).map_err(CliError::Config)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(io_err(format!("cannot read checkpoint {}", path.display())))?;
    Checkpoint::from_json(&text).map_err(CliError::Usage)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// 17 significant digits, the round-trip precision of an f64.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

// ---------------------------------------------------------------- train

pub fn train(config_path: &Path, overrides: &Overrides, out: &Path, ui: Ui) -> Result<RunManifest> {
    let start = Instant::now();
    let config = read_config(config_path, overrides)?;
    let mut dir = OutDir::create(out).map_err(io_err(format!("cannot create {}", out.display())))?;
    let rendered = config::render(&config);
    let cfg_path = dir.write("config.toml", &rendered).map_err(io_err("writing config"))?;
    ui.say(format!("training {} / {} D={} for {} iterations (seed {})", config.task, config.cell, config.state_dim, config.iterations, config.seed));

    let mut saved = Vec::new();
    let mut on_checkpoint = |ck: &Checkpoint| saved.push(ck.clone());
    let outcome = match train_run_with(&config, None, &mut on_checkpoint) {
        Ok(o) => o,
        Err(TrainError::Diverged { iteration, reason, last_good }) => {
            dir.write("checkpoint_last_good.json", &last_good.to_json()).map_err(io_err("writing checkpoint"))?;
            let mut m = RunManifest::new("train", vec!["train".into(), "--config".into(), absolute(&cfg_path)?]).with_config(&config);
            m.seeds = vec![config.seed];
            m.metrics = json!({ "diverged_at": iteration, "reason": reason });
            dir.finish(m).map_err(io_err("writing manifest"))?;
            return Err(CliError::Numerical(format!("training diverged at iteration {iteration}: {reason}")));
        }
        Err(e) => return Err(e.into()),
    };
    for ck in &saved {
        dir.write(&format!("checkpoints/iter_{:06}.json", ck.iteration), &ck.to_json()).map_err(io_err("writing checkpoint"))?;
    }
    dir.write("checkpoint.json", &outcome.checkpoint.to_json()).map_err(io_err("writing checkpoint"))?;
    dir.write("metrics.csv", &metrics_csv(&outcome.log)).map_err(io_err("writing metric log"))?;
    dir.write("eval.json", &to_json(&outcome.eval)).map_err(io_err("writing eval"))?;

    let mut m = RunManifest::new("train", vec!["train".into(), "--config".into(), absolute(&cfg_path)?]).with_config(&config);
    m.seeds = vec![config.seed];
    m.wallclock_ms = elapsed_ms(start);
    m.metrics = serde_json::to_value(&outcome.eval).expect("metrics serialize");
    ui.say(format!("held-out total loss {:.6}", outcome.eval.losses.total));
    dir.finish(m).map_err(io_err("writing manifest"))
}

// ---------------------------------------------------------------- shared helpers

/// Held-out batch for `config` drawn with `holdout_seed` in place of the run seed.
fn holdout(config: &TrainConfig, holdout_seed: Option<u64>) -> Result<TaskBatch> {
    let c = TrainConfig { seed: holdout_seed.unwrap_or(config.seed), ..config.clone() };
    holdout_batch(&c).map_err(|e| CliError::Config(vec![e.to_string()]))
}

/// Config for evaluation: the checkpoint's own, or `config_path` checked against its dimensions.
fn eval_config(ck: &Checkpoint, config_path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = config_path else { return Ok(ck.config.clone()) };
    let c = read_config(path, &Overrides::default())?;
    let theta = &ck.theta;
    if c.task.input_dim() != theta.input_dim || c.task.output_dim() != theta.output_dim {
        return Err(CliError::Usage(format!(
            "task mismatch: {} expects {} inputs and {} outputs, checkpoint has {} and {}",
            c.task,
            c.task.input_dim(),
            c.task.output_dim(),
            theta.input_dim,
            theta.output_dim
        )));
    }
    Ok(c)
}

fn context_label(meta: &TrialMeta) -> String {
    match meta {
        TrialMeta::Context { context, .. } => context.to_string(),
        TrialMeta::ThreeBit { .. } => String::new(),
    }
}

fn fixed_points_json(theta: &jslds_core::cells::CellParams, fps: &FixedPointSet, opts: &FixedPointOptions) -> Result<String> {
    let fixed = fps.is_fixed();
    let points = (0..fps.len())
        .map(|i| {
            let lin = LinearizationReport::new(theta, &fps.points[i], &fps.u_star[i])?;
            Ok(json!({
                "id": i,
                "point": fps.points[i],
                "u_star": fps.u_star[i],
                "speed": fps.speeds[i],
                "fixed": fixed[i],
                "cluster_size": fps.cluster_sizes[i],
                "eigenvalues": lin.eigenvalues.iter().map(|&z| complex_pair(z)).collect::<Vec<_>>(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(to_json(&json!({
        "options": opts,
        "candidates": fps.candidates,
        "survivors": fps.survivors,
        "candidate_cluster": fps.candidate_cluster,
        "points": points,
    })))
}

// ---------------------------------------------------------------- eval

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub baseline: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub holdout_seed: Option<u64>,
    pub fp: FixedPointOptions,
}

pub const ERRORS_HEADER: &str = "trial,jslds_full_rollout,jslds_one_step,standard_one_step";

pub fn eval(args: &EvalArgs, argv: Vec<String>, out: &Path, ui: Ui) -> Result<RunManifest> {
    let start = Instant::now();
    let ck = load_checkpoint(args.checkpoint)?;
    let config = eval_config(&ck, args.config)?;
    let batch = holdout(&config, args.holdout_seed)?;
    let standard_theta = match args.baseline {
        Some(p) => load_checkpoint(p)?.theta,
        None => ck.theta.clone(),
    };
    if standard_theta.state_dim == 0 || standard_theta.input_dim != ck.theta.input_dim {
        return Err(CliError::Usage("baseline checkpoint does not match the task".into()));
    }
    let mut dir = OutDir::create(out).map_err(io_err(format!("cannot create {}", out.display())))?;

    let full = relative_error_jslds(&ck.theta, &ck.phi, &batch.inputs, &batch.u_star)?;
    let one_step = relative_error_jslds_one_step(&ck.theta, &ck.phi, &batch.inputs, &batch.u_star)?;
    ui.say(format!("finding fixed points for the standard method ({} iterations of Adam)", args.fp.max_iters));
    let fps = baseline_fixed_points(&standard_theta, &batch, &args.fp)?;
    let mut notes = Vec::new();
    let standard = if fps.is_empty() {
        notes.push("no fixed or slow points survived; standard errors are NaN".to_string());
        vec![f64::NAN; batch.batch_size()]
    } else {
        match relative_error_standard(&standard_theta, &fps, &batch.inputs, &batch.u_star) {
            Ok(r) => r.per_trial,
            Err(AnalyzeError::NoMatchingFixedPoint { trial }) => {
                notes.push(format!("no fixed point shares the u* of trial {trial}; standard errors are NaN"));
                vec![f64::NAN; batch.batch_size()]
            }
            Err(e) => return Err(e.into()),
        }
    };
    dir.write("fixed_points.json", &fixed_points_json(&standard_theta, &fps, &args.fp)?).map_err(io_err("writing fixed points"))?;

    let columns = [&full.per_trial, &one_step.per_trial, &standard];
    let mut csv = format!("{ERRORS_HEADER}\n");
    for b in 0..batch.batch_size() {
        let _ = writeln!(csv, "{b},{}", columns.iter().map(|c| num(c[b])).collect::<Vec<_>>().join(","));
    }
    let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_std(c)).collect();
    let _ = writeln!(csv, "mean,{}", stats.iter().map(|s| num(s.0)).collect::<Vec<_>>().join(","));
    let _ = writeln!(csv, "std,{}", stats.iter().map(|s| num(s.1)).collect::<Vec<_>>().join(","));
    dir.write("errors.csv", &csv).map_err(io_err("writing errors"))?;

    let mut m = RunManifest::new("eval", argv).with_config(&config);
    m.seeds = vec![args.holdout_seed.unwrap_or(config.seed)];
    m.wallclock_ms = elapsed_ms(start);
    m.metrics = json!({
        "jslds_full_rollout": stats[0].0,
        "jslds_one_step": stats[1].0,
        "standard_one_step": stats[2].0,
        "fixed_points": fps.len(),
        "fixed_point_options": args.fp,
        "notes": notes,
    });
    ui.say(format!("mean relative error: JSLDS {:.4e}, standard {:.4e}", stats[0].0, stats[2].0));
    dir.finish(m).map_err(io_err("writing manifest"))
}

// ---------------------------------------------------------------- fixed-points

pub fn fixed_points(
    checkpoint: &Path,
    u_star: Option<&[f64]>,
    holdout_seed: Option<u64>,
    fp: FixedPointOptions,
    argv: Vec<String>,
    out: &Path,
    ui: Ui,
) -> Result<RunManifest> {
    let start = Instant::now();
    let ck = load_checkpoint(checkpoint)?;
    let mut batch = holdout(&ck.config, holdout_seed)?;
    if let Some(u) = u_star {
        if u.len() != ck.theta.input_dim {
            return Err(CliError::Usage(format!("--u-star has {} entries, the model takes {} inputs", u.len(), ck.theta.input_dim)));
        }
        batch.u_star = Matrix::from_fn(batch.batch_size(), u.len(), |_, c| u[c]);
    }
    let mut dir = OutDir::create(out).map_err(io_err(format!("cannot create {}", out.display())))?;
    let fps = baseline_fixed_points(&ck.theta, &batch, &fp)?;
    ui.say(format!("{} of {} candidates reached q <= {:e}; {} unique points", fps.survivors, fps.candidates, fp.tol, fps.len()));
    dir.write("fixed_points.json", &fixed_points_json(&ck.theta, &fps, &fp)?).map_err(io_err("writing fixed points"))?;
    let mut m = RunManifest::new("fixed-points", argv).with_config(&ck.config);
    m.wallclock_ms = elapsed_ms(start);
    m.metrics = json!({ "points": fps.len(), "survivors": fps.survivors, "candidates": fps.candidates });
    dir.finish(m).map_err(io_err("writing manifest"))
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalysisKind {
    Eigen,
    Selection,
    Subspace,
    Pca,
}

/// One cluster of held-out expansion points sharing a `u*`.
struct ExpansionCluster {
    representative: Vec<f64>,
    u_star: Vec<f64>,
    size: usize,
    context: Option<usize>,
}

/// Expansion points of the held-out batch, leader-clustered per `u*` at the merge radius.
fn expansion_clusters(ck: &Checkpoint, batch: &TaskBatch) -> Result<Vec<ExpansionCluster>> {
    let traj = co_rollout(&ck.theta, &ck.phi, &batch.inputs, &batch.u_star)?;
    let mut groups: Vec<(Vec<f64>, Option<usize>, Vec<Vec<f64>>)> = Vec::new();
    for (tr, meta) in traj.iter().zip(&batch.meta) {
        let context = match meta {
            TrialMeta::Context { context, .. } => Some(*context),
            TrialMeta::ThreeBit { .. } => None,
        };
        let slot = match groups.iter().position(|g| g.0 == tr.u_star) {
            Some(i) => i,
            None => {
                groups.push((tr.u_star.clone(), context, Vec::new()));
                groups.len() - 1
            }
        };
        groups[slot].2.extend(tr.e_star.iter().cloned());
    }
    let mut out = Vec::new();
    for (u_star, context, points) in groups {
        for members in leader_clusters(&points, MERGE_RADIUS) {
            out.push(ExpansionCluster { representative: points[members[0]].clone(), u_star: u_star.clone(), size: members.len(), context });
        }
    }
    out.sort_by(|a, b| b.size.cmp(&a.size));
    Ok(out)
}

fn vectors_json(vs: &[Vec<num_complex::Complex64>], k: usize) -> Vec<Vec<[f64; 2]>> {
    vs.iter().take(k).map(|v| v.iter().map(|&z| complex_pair(z)).collect()).collect()
}

/// `trial,t,context,<prefix>0..` rows for `coords` laid out trial-major.
fn projections_csv(batch: &TaskBatch, trials: &[usize], coords: &Matrix, prefix: &str) -> String {
    let t_len = batch.timesteps();
    let mut out = String::from("trial,t,context");
    for k in 0..coords.cols() {
        let _ = write!(out, ",{prefix}{k}");
    }
    out.push('\n');
    for (i, &b) in trials.iter().enumerate() {
        for t in 0..t_len {
            let _ = write!(out, "{b},{t},{}", context_label(&batch.meta[b]));
            for v in coords.row(i * t_len + t) {
                let _ = write!(out, ",{}", num(*v));
            }
            out.push('\n');
        }
    }
    out
}

/// Held-out RNN states of `trials`, stacked trial-major into `(N*T) x D`.
fn stacked_states(ck: &Checkpoint, batch: &TaskBatch, trials: &[usize]) -> Result<Matrix> {
    let states = rnn_states(&ck.theta, &batch.inputs)?;
    let rows: Vec<Vec<f64>> = trials.iter().flat_map(|&b| states.iter().map(move |s| s.row(b).to_vec())).collect();
    Ok(Matrix::from_rows(&rows))
}

pub struct AnalyzeArgs<'a> {
    pub checkpoint: &'a Path,
    pub kind: AnalysisKind,
    pub holdout_seed: Option<u64>,
    pub top: usize,
    pub components: usize,
}

pub fn analyze(args: &AnalyzeArgs, argv: Vec<String>, out: &Path, ui: Ui) -> Result<RunManifest> {
    let start = Instant::now();
    let ck = load_checkpoint(args.checkpoint)?;
    let batch = holdout(&ck.config, args.holdout_seed)?;
    let mut dir = OutDir::create(out).map_err(io_err(format!("cannot create {}", out.display())))?;
    let theta = &ck.theta;
    let metrics = match args.kind {
        AnalysisKind::Eigen => {
            let clusters = expansion_clusters(&ck, &batch)?;
            let mut points = Vec::with_capacity(clusters.len());
            for (i, c) in clusters.iter().enumerate() {
                let lin = LinearizationReport::new(theta, &c.representative, &c.u_star)?;
                points.push(json!({
                    "id": i,
                    "size": c.size,
                    "context": c.context,
                    "point": c.representative,
                    "u_star": c.u_star,
                    "speed": lin.speed,
                    "eigenvalues": lin.eigenvalues.iter().map(|&z| complex_pair(z)).collect::<Vec<_>>(),
                    "near_one": lin.count_near_one(MARGINAL_TOL),
                    "near_one_full": lin.count_near_one(MARGINAL_TOL_FULL),
                    "right_eigenvectors": vectors_json(&lin.right, args.top),
                    "left_eigenvectors": vectors_json(&lin.left, args.top),
                }));
            }
            ui.say(format!("{} expansion-point clusters", points.len()));
            let n = points.len();
            dir.write("eigen_report.json", &to_json(&json!({ "merge_radius": MERGE_RADIUS, "points": points })))
                .map_err(io_err("writing eigen report"))?;
            json!({ "clusters": n })
        }
        AnalysisKind::Selection => {
            let clusters = expansion_clusters(&ck, &batch)?;
            let k_top = args.top.min(theta.state_dim);
            let mut points = Vec::with_capacity(clusters.len());
            for (i, c) in clusters.iter().enumerate() {
                let lin = LinearizationReport::new(theta, &c.representative, &c.u_star)?;
                let u = c.u_star.len();
                let probes = Matrix::from_fn(u, u, |r, k| c.u_star[r] + if r == k { 1.0 } else { 0.0 });
                let sel = selection_analysis(&lin, &probes, k_top)?;
                let readout = jslds_core::analyze::readout_effective_input(theta, &lin, &probes)?;
                points.push(json!({
                    "id": i,
                    "size": c.size,
                    "context": c.context,
                    "u_star": c.u_star,
                    "eigenvalues": lin.eigenvalues.iter().take(k_top).map(|&z| complex_pair(z)).collect::<Vec<_>>(),
                    "selection": (0..k_top).map(|r| sel.row(r).to_vec()).collect::<Vec<_>>(),
                    "readout": (0..readout.rows()).map(|r| readout.row(r).to_vec()).collect::<Vec<_>>(),
                }));
            }
            let n = points.len();
            dir.write("selection.json", &to_json(&json!({ "probe": "u* + unit step on each input", "points": points })))
                .map_err(io_err("writing selection report"))?;
            json!({ "clusters": n })
        }
        AnalysisKind::Subspace => {
            if ck.config.task != TaskKind::Context {
                return Err(CliError::Usage("subspace analysis needs a context-task checkpoint".into()));
            }
            let clusters = expansion_clusters(&ck, &batch)?;
            let axes = input_axes(theta, &[0, 1]);
            let mut bases = Vec::new();
            let mut csv = String::new();
            for context in 0..2 {
                let reports = clusters
                    .iter()
                    .filter(|c| c.context == Some(context))
                    .map(|c| LinearizationReport::new(theta, &c.representative, &c.u_star))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if reports.is_empty() {
                    continue;
                }
                let basis = build_choice_subspace(&reports, &axes)?;
                let trials: Vec<usize> = (0..batch.batch_size()).filter(|&b| matches!(batch.meta[b], TrialMeta::Context { context: c, .. } if c == context)).collect();
                let coords = project(&stacked_states(&ck, &batch, &trials)?, &basis);
                let part = projections_csv(&batch, &trials, &coords, "axis");
                if csv.is_empty() {
                    csv = part;
                } else {
                    csv.extend(part.lines().skip(1).map(|l| format!("{l}\n")));
                }
                bases.push(json!({
                    "context": context,
                    "axes": ["choice", "motion", "color"],
                    "basis": (0..basis.rows()).map(|r| basis.row(r).to_vec()).collect::<Vec<_>>(),
                    "expansion_points": reports.len(),
                }));
            }
            dir.write("projections.csv", &csv).map_err(io_err("writing projections"))?;
            dir.write("subspace.json", &to_json(&json!({ "bases": bases }))).map_err(io_err("writing subspace"))?;
            json!({ "contexts": bases.len() })
        }
        AnalysisKind::Pca => {
            let trials: Vec<usize> = (0..batch.batch_size()).collect();
            let pca = pca_project(&stacked_states(&ck, &batch, &trials)?, args.components)?;
            dir.write("projections.csv", &projections_csv(&batch, &trials, &pca.coords, "pc")).map_err(io_err("writing projections"))?;
            let summary = json!({
                "components": (0..pca.components.rows()).map(|r| pca.components.row(r).to_vec()).collect::<Vec<_>>(),
                "mean": pca.mean,
                "explained_variance": pca.explained_variance,
                "explained_ratio": pca.explained_ratio,
            });
            dir.write("pca.json", &to_json(&summary)).map_err(io_err("writing pca"))?;
            json!({ "explained_ratio": pca.explained_ratio })
        }
    };
    let mut m = RunManifest::new("analyze", argv).with_config(&ck.config);
    m.wallclock_ms = elapsed_ms(start);
    m.metrics = metrics;
    dir.finish(m).map_err(io_err("writing manifest"))
}

// ---------------------------------------------------------------- multiseed

pub fn multiseed(config_path: &Path, overrides: &Overrides, n: usize, out: &Path, ui: Ui) -> Result<RunManifest> {
    let start = Instant::now();
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let config = read_config(config_path, overrides)?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| config.seed + i).collect();
    let mut dir = OutDir::create(out).map_err(io_err(format!("cannot create {}", out.display())))?;
    let cfg_path = dir.write("config.toml", &config::render(&config)).map_err(io_err("writing config"))?;
    ui.say(format!("training {n} seeds starting at {}", config.seed));
    let (report, outcomes) = multi_seed(&config, &seeds)?;
    for (seed, o) in seeds.iter().zip(&outcomes) {
        dir.write(&format!("seed_{seed}/checkpoint.json"), &o.checkpoint.to_json()).map_err(io_err("writing checkpoint"))?;
        dir.write(&format!("seed_{seed}/metrics.csv"), &metrics_csv(&o.log)).map_err(io_err("writing metric log"))?;
        dir.write(&format!("seed_{seed}/eval.json"), &to_json(&o.eval)).map_err(io_err("writing eval"))?;
    }
    dir.write("report.json", &to_json(&report)).map_err(io_err("writing report"))?;
    let mut m = RunManifest::new("multiseed", vec!["multiseed".into(), "--config".into(), absolute(&cfg_path)?, "--n".into(), n.to_string()])
        .with_config(&config);
    m.seeds = seeds;
    m.wallclock_ms = elapsed_ms(start);
    m.metrics = serde_json::to_value(&report.aggregates).expect("aggregates serialize");
    for a in &report.aggregates {
        ui.say(format!("{:>16}: {:.6} +- {:.6}", a.name, a.mean, a.std));
    }
    dir.finish(m).map_err(io_err("writing manifest"))
}

// ---------------------------------------------------------------- replay

/// Outcome of regenerating a run from its manifest.
#[derive(Debug)]
pub struct Replay {
    pub dir: PathBuf,
    pub compared: usize,
    pub mismatched: Vec<String>,
}

/// Re-executes the manifest's command into `out` and compares artifact hashes.
pub fn replay(manifest_path: &Path, out: &Path, run: &dyn Fn(Vec<String>, &Path) -> Result<RunManifest>) -> Result<Replay> {
    let manifest_path = if manifest_path.is_dir() { manifest_path.join(MANIFEST_FILE) } else { manifest_path.to_path_buf() };
    let original = RunManifest::load(&manifest_path).map_err(CliError::Usage)?;
    if original.version != env!("CARGO_PKG_VERSION") {
        return Err(CliError::Usage(format!("manifest was written by version {}, this is {}", original.version, env!("CARGO_PKG_VERSION"))));
    }
    if out.join(MANIFEST_FILE).exists() && fs::canonicalize(out).ok() == manifest_path.parent().and_then(|p| fs::canonicalize(p).ok()) {
        return Err(CliError::Usage("replay output directory must differ from the original run".into()));
    }
    let fresh = run(original.argv.clone(), out)?;
    let mut mismatched = Vec::new();
    for a in &original.artifacts {
        match fresh.artifacts.iter().find(|b| b.path == a.path) {
            Some(b) if b.sha256 == a.sha256 => {}
            _ => mismatched.push(a.path.clone()),
        }
    }
    Ok(Replay { dir: out.to_path_buf(), compared: original.artifacts.len(), mismatched })
}
