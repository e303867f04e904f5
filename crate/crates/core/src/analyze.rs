//! Post-training analyses: numerical fixed points, linearizations and their
//! spectra, the two relative-error protocols, selection vectors, the
//! choice/motion/color subspace and PCA projections.

use crate::cells::{CellParams, CellWeights};
use crate::diffcore::{DiffError, Tape};
use crate::jslds::{co_rollout, rnn_states, ExpansionParams};
use crate::linalg::{eig_lr, gram_schmidt, normalize_phase, solve, sym_eig, EigError};
use crate::matrix::Matrix;
use crate::train::OptimizerState;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eig(#[from] EigError),
    #[error("{0}")]
    Invalid(String),
    #[error("no fixed point shares the trial's u* (trial {trial})")]
    NoMatchingFixedPoint { trial: usize },
    #[error("top eigenvectors average to (nearly) zero; sign alignment is ambiguous")]
    AmbiguousSign,
}

pub type Result<T> = std::result::Result<T, AnalyzeError>;

/// Speed below which a point counts as fixed.
pub const FIXED_TOL: f64 = 1e-6;
/// Speed below which a point counts as slow.
pub const SLOW_TOL: f64 = 1e-3;
pub const MERGE_RADIUS: f64 = 0.1;
/// Distance from `(1, 0)` for "marginally stable" at desk scale.
pub const MARGINAL_TOL: f64 = 0.05;
/// The same threshold as reported at full scale.
pub const MARGINAL_TOL_FULL: f64 = 0.025;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `q(h) = ||h - F(h, u*)||^2`.
pub fn speed(theta: &CellParams, h: &[f64], u_star: &[f64]) -> Result<f64> {
    let f = theta.forward(h, u_star)?;
    Ok(h.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Survivors must reach this speed.
    pub tol: f64,
    pub merge_radius: f64,
    /// Newton steps on `h - F(h)` after the Adam phase. A step is kept only if
    /// it lowers the speed.
    pub newton_steps: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { learning_rate: 0.01, max_iters: 1000, tol: SLOW_TOL, merge_radius: MERGE_RADIUS, newton_steps: 20 }
    }
}

/// Unique fixed/slow points with the static input they were found under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    pub points: Vec<Vec<f64>>,
    pub u_star: Vec<Vec<f64>>,
    pub speeds: Vec<f64>,
    /// Survivors merged into each representative.
    pub cluster_sizes: Vec<usize>,
    /// Cluster of every surviving candidate, in candidate order (`None` for
    /// candidates that did not reach the tolerance).
    pub candidate_cluster: Vec<Option<usize>>,
    pub tol: f64,
    pub merge_radius: f64,
    pub candidates: usize,
    pub survivors: usize,
}

impl FixedPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether each point is fixed (speed at most [`FIXED_TOL`]) rather than only slow.
    pub fn is_fixed(&self) -> Vec<bool> {
        self.speeds.iter().map(|&q| q <= FIXED_TOL).collect()
    }

    /// Index of the Euclidean-nearest point found under exactly `u_star`.
    pub fn nearest(&self, h: &[f64], u_star: &[f64]) -> Option<usize> {
        (0..self.len())
            .filter(|&i| self.u_star[i] == u_star)
            .min_by(|&i, &j| dist(&self.points[i], h).total_cmp(&dist(&self.points[j], h)))
    }
}

/// Minimizes `q` from every candidate (Adam, then Newton polish), keeps those
/// with `q <= tol` and merges survivors within `merge_radius` of an earlier,
/// slower-or-equal representative under the same `u*`.
pub fn find_fixed_points(
    theta: &CellParams,
    u_star: &[Vec<f64>],
    candidates: &[Vec<f64>],
    opts: &FixedPointOptions,
) -> Result<FixedPointSet> {
    if candidates.is_empty() {
        return Err(AnalyzeError::Invalid("no fixed-point candidates".into()));
    }
    if u_star.len() != candidates.len() {
        return Err(AnalyzeError::Invalid(format!("{} candidates but {} u* rows", candidates.len(), u_star.len())));
    }
    let d = theta.state_dim;
    if candidates.iter().any(|c| c.len() != d) || u_star.iter().any(|u| u.len() != theta.input_dim) {
        return Err(AnalyzeError::Invalid("candidate or u* dimension mismatch".into()));
    }
    let n = candidates.len();
    let mut h = Matrix::from_rows(candidates);
    let us = Matrix::from_rows(u_star);
    let mut best = h.clone();
    let mut best_q = vec![f64::INFINITY; n];
    let mut adam = OptimizerState::new(&[&h]);
    for iter in 0..=opts.max_iters {
        let mut tape = Tape::new();
        let cell = theta.register_constant(&mut tape)?;
        let hv = tape.param(h.clone())?;
        let uv = tape.constant(us.clone())?;
        let f = cell.step(&mut tape, hv, uv)?;
        let diff = tape.sub(hv, f)?;
        let loss = tape.sum_squares(diff)?;
        let dv = tape.value(diff);
        let mut all_done = true;
        for r in 0..n {
            let q: f64 = dv.row(r).iter().map(|x| x * x).sum();
            if q < best_q[r] {
                best_q[r] = q;
                best.row_mut(r).copy_from_slice(h.row(r));
            }
            all_done &= best_q[r] <= 1e-20;
        }
        if all_done || iter == opts.max_iters {
            break;
        }
        let grads = tape.backward(loss)?;
        let g = grads.wrt(hv);
        adam.adam_step(&mut [&mut h], &[g], opts.learning_rate).map_err(AnalyzeError::Invalid)?;
    }
    let mut points: Vec<Vec<f64>> = (0..n).map(|r| best.row(r).to_vec()).collect();
    for (r, p) in points.iter_mut().enumerate() {
        best_q[r] = newton_polish(theta, p, &u_star[r], best_q[r], opts.newton_steps)?;
    }
    let mut order: Vec<usize> = (0..n).filter(|&r| best_q[r] <= opts.tol).collect();
    order.sort_by(|&a, &b| best_q[a].total_cmp(&best_q[b]).then(a.cmp(&b)));
    let mut set = FixedPointSet {
        points: Vec::new(),
        u_star: Vec::new(),
        speeds: Vec::new(),
        cluster_sizes: Vec::new(),
        candidate_cluster: vec![None; n],
        tol: opts.tol,
        merge_radius: opts.merge_radius,
        candidates: n,
        survivors: order.len(),
    };
    for r in order {
        let existing = (0..set.len()).find(|&c| set.u_star[c] == u_star[r] && dist(&set.points[c], &points[r]) <= opts.merge_radius);
        let c = match existing {
            Some(c) => {
                set.cluster_sizes[c] += 1;
                c
            }
            None => {
                set.points.push(points[r].clone());
                set.u_star.push(u_star[r].clone());
                set.speeds.push(best_q[r]);
                set.cluster_sizes.push(1);
                set.len() - 1
            }
        };
        set.candidate_cluster[r] = Some(c);
    }
    Ok(set)
}

fn newton_polish(theta: &CellParams, h: &mut Vec<f64>, u_star: &[f64], mut q: f64, steps: usize) -> Result<f64> {
    for _ in 0..steps {
        if q == 0.0 {
            break;
        }
        let f = theta.forward(h, u_star)?;
        let g: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a - b).collect();
        let j = theta.rec_jacobian(h, u_star)?;
        let lhs = Matrix::identity(h.len()).zip_map(&j, |i, j| i - j);
        let Some(step) = solve(&lhs, &g) else { break };
        let trial: Vec<f64> = h.iter().zip(&step).map(|(a, s)| a - s).collect();
        let q_trial = speed(theta, &trial, u_star)?;
        if !(q_trial < q) {
            break;
        }
        *h = trial;
        q = q_trial;
    }
    Ok(q)
}

/// Candidate states: every `stride`-th timestep of the first `trials` trials.
/// `states` is time-major (`states[t]` is `B x D`). Returns candidates and the
/// trial index each came from.
pub fn candidates_from_states(states: &[Matrix], trials: usize, stride: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let batch = states.first().map_or(0, Matrix::rows);
    let mut out = Vec::new();
    let mut origin = Vec::new();
    for b in 0..trials.min(batch) {
        for t in (0..states.len()).step_by(stride.max(1)) {
            out.push(states[t].row(b).to_vec());
            origin.push(b);
        }
    }
    (out, origin)
}

/// A real-or-complex number as `[re, im]`, the layout used in reports.
pub fn complex_pair(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

/// Linearization of the cell at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub point: Vec<f64>,
    pub u_star: Vec<f64>,
    pub speed: f64,
    pub j_rec: Matrix,
    pub j_inp: Matrix,
    /// Sorted by modulus, descending.
    pub eigenvalues: Vec<Complex64>,
    pub right: Vec<Vec<Complex64>>,
    pub left: Vec<Vec<Complex64>>,
}

impl LinearizationReport {
    pub fn new(theta: &CellParams, point: &[f64], u_star: &[f64]) -> Result<Self> {
        let (j_rec, j_inp) = theta.jacobians(point, u_star)?;
        let e = eig_lr(&j_rec)?;
        let mut right = e.right;
        let mut left = e.left;
        right.iter_mut().chain(left.iter_mut()).for_each(|v| normalize_phase(v));
        Ok(LinearizationReport {
            point: point.to_vec(),
            u_star: u_star.to_vec(),
            speed: speed(theta, point, u_star)?,
            j_rec,
            j_inp,
            eigenvalues: e.values,
            right,
            left,
        })
    }

    /// Eigenvalues within `tol` of `1 + 0i`.
    pub fn count_near_one(&self, tol: f64) -> usize {
        self.eigenvalues.iter().filter(|z| (*z - Complex64::new(1.0, 0.0)).norm() <= tol).count()
    }

    /// Modulus of the `k`-th eigenvalue (0-based), if present.
    pub fn modulus(&self, k: usize) -> Option<f64> {
        self.eigenvalues.get(k).map(|z| z.norm())
    }
}

/// Mean relative error `||h_t - h_lin_t|| / ||h_t||` over all trials and timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub mean: f64,
    pub per_trial: Vec<f64>,
    /// Timesteps skipped because `h_t` was exactly zero.
    pub skipped: usize,
}

fn summarize(per_step: Vec<Vec<Option<f64>>>) -> RelativeErrors {
    let mut skipped = 0;
    let mut total = 0.0;
    let mut count = 0usize;
    let per_trial = per_step
        .into_iter()
        .map(|steps| {
            let vals: Vec<f64> = steps.iter().filter_map(|e| *e).collect();
            skipped += steps.len() - vals.len();
            total += vals.iter().sum::<f64>();
            count += vals.len();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    RelativeErrors { mean: if count == 0 { f64::NAN } else { total / count as f64 }, per_trial, skipped }
}

fn rel_err(h: &[f64], lin: &[f64]) -> Option<f64> {
    let n = norm(h);
    (n > 0.0).then(|| dist(h, lin) / n)
}

/// `p + J_rec (h_prev - p) + J_inp (u - u*)`.
fn linear_step(j_rec: &Matrix, j_inp: &Matrix, p: &[f64], h_prev: &[f64], u: &[f64], u_star: &[f64]) -> Vec<f64> {
    let dh: Vec<f64> = h_prev.iter().zip(p).map(|(a, b)| a - b).collect();
    let du: Vec<f64> = u.iter().zip(u_star).map(|(a, b)| a - b).collect();
    let a = j_rec.mul_vec(&dh);
    let b = j_inp.mul_vec(&du);
    p.iter().zip(a).zip(b).map(|((p, a), b)| p + a + b).collect()
}

fn check_batch(inputs: &[Matrix], u_star: &Matrix) -> Result<usize> {
    let batch = u_star.rows();
    if inputs.is_empty() || batch == 0 {
        return Err(AnalyzeError::Invalid("empty held-out batch".into()));
    }
    if inputs.iter().any(|u| u.rows() != batch) {
        return Err(AnalyzeError::Invalid("inputs and u* disagree on the batch size".into()));
    }
    Ok(batch)
}

/// Standard one-step protocol: from the true `h_{t-1}`, linearize around the
/// nearest fixed/slow point found under the trial's `u*`.
pub fn relative_error_standard(theta: &CellParams, fps: &FixedPointSet, inputs: &[Matrix], u_star: &Matrix) -> Result<RelativeErrors> {
    let batch = check_batch(inputs, u_star)?;
    if fps.is_empty() {
        return Err(AnalyzeError::Invalid("empty fixed-point set".into()));
    }
    let jac = fps
        .points
        .iter()
        .zip(&fps.u_star)
        .map(|(p, u)| theta.jacobians(p, u))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let states = rnn_states(theta, inputs)?;
    let zero = vec![0.0; theta.state_dim];
    let mut per_step = Vec::with_capacity(batch);
    for b in 0..batch {
        let us = u_star.row(b);
        let mut errs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let prev = if t == 0 { &zero[..] } else { states[t - 1].row(b) };
            let k = fps.nearest(prev, us).ok_or(AnalyzeError::NoMatchingFixedPoint { trial: b })?;
            let lin = linear_step(&jac[k].0, &jac[k].1, &fps.points[k], prev, inputs[t].row(b), us);
            errs.push(rel_err(states[t].row(b), &lin));
        }
        per_step.push(errs);
    }
    Ok(summarize(per_step))
}

/// Full JSLDS rollout from `a_0 = 0`, compared with the co-trained RNN.
pub fn relative_error_jslds(theta: &CellParams, phi: &ExpansionParams, inputs: &[Matrix], u_star: &Matrix) -> Result<RelativeErrors> {
    check_batch(inputs, u_star)?;
    let traj = co_rollout(theta, phi, inputs, u_star)?;
    Ok(summarize(
        traj.iter()
            .map(|tr| tr.h.iter().zip(&tr.a).map(|(h, a)| rel_err(h, a)).collect())
            .collect(),
    ))
}

/// One-step-ahead JSLDS: `a_{t-1}` is replaced by the true `h_{t-1}` at every step.
pub fn relative_error_jslds_one_step(theta: &CellParams, phi: &ExpansionParams, inputs: &[Matrix], u_star: &Matrix) -> Result<RelativeErrors> {
    let batch = check_batch(inputs, u_star)?;
    let states = rnn_states(theta, inputs)?;
    let zero = vec![0.0; theta.state_dim];
    let mut per_step = Vec::with_capacity(batch);
    for b in 0..batch {
        let us = u_star.row(b);
        let mut errs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let prev = if t == 0 { &zero[..] } else { states[t - 1].row(b) };
            let e = phi.forward(prev)?;
            let (jr, ji) = theta.jacobians(&e, us)?;
            let lin = linear_step(&jr, &ji, &e, prev, inputs[t].row(b), us);
            errs.push(rel_err(states[t].row(b), &lin));
        }
        per_step.push(errs);
    }
    Ok(summarize(per_step))
}

fn effective_inputs(report: &LinearizationReport, probes: &Matrix) -> Result<Vec<Vec<f64>>> {
    if probes.rows() != report.u_star.len() {
        return Err(AnalyzeError::Invalid(format!("probe matrix has {} rows, expected {}", probes.rows(), report.u_star.len())));
    }
    Ok((0..probes.cols())
        .map(|k| {
            let du: Vec<f64> = probes.column(k).iter().zip(&report.u_star).map(|(p, u)| p - u).collect();
            report.j_inp.mul_vec(&du)
        })
        .collect())
}

fn normalize_max_abs(mut m: Matrix) -> Matrix {
    let s = m.max_abs();
    if s > 0.0 {
        m.scale_assign(1.0 / s);
    }
    m
}

/// `k_top x K` matrix of (real parts of) top left eigenvectors dotted with the
/// effective inputs `J_inp (probe_k - u*)`, scaled so the largest magnitude is 1.
pub fn selection_analysis(report: &LinearizationReport, probes: &Matrix, k_top: usize) -> Result<Matrix> {
    if k_top > report.left.len() {
        return Err(AnalyzeError::Invalid(format!("asked for {k_top} eigenvectors, have {}", report.left.len())));
    }
    let eff = effective_inputs(report, probes)?;
    let raw = Matrix::from_fn(k_top, eff.len(), |i, k| {
        report.left[i].iter().zip(&eff[k]).map(|(w, x)| w.re * x).sum()
    });
    Ok(normalize_max_abs(raw))
}

/// `O x K` matrix of readout rows dotted with the effective inputs, max-abs normalized.
pub fn readout_effective_input(theta: &CellParams, report: &LinearizationReport, probes: &Matrix) -> Result<Matrix> {
    let eff = effective_inputs(report, probes)?;
    let c = &theta.readout_w;
    Ok(normalize_max_abs(Matrix::from_fn(c.rows(), eff.len(), |o, k| dot(c.row(o), &eff[k]))))
}

/// Choice axis from top right eigenvectors at the given reports, then the given
/// input axes, orthonormalized in that order. Rows of the result are the axes.
pub fn build_choice_subspace(reports: &[LinearizationReport], input_axes: &[Vec<f64>]) -> Result<Matrix> {
    let first = reports.first().ok_or_else(|| AnalyzeError::Invalid("no expansion points".into()))?;
    let d = first.point.len();
    let mut mean = vec![0.0; d];
    let reference: Vec<f64> = first.right[0].iter().map(|z| z.re).collect();
    for r in reports {
        let v: Vec<f64> = r.right[0].iter().map(|z| z.re).collect();
        let sign = if dot(&v, &reference) < 0.0 { -1.0 } else { 1.0 };
        mean.iter_mut().zip(&v).for_each(|(m, x)| *m += sign * x);
    }
    let n = norm(&mean);
    if n <= 1e-12 * reports.len() as f64 {
        return Err(AnalyzeError::AmbiguousSign);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut axes = vec![mean];
    axes.extend(input_axes.iter().cloned());
    let basis = gram_schmidt(&axes).ok_or_else(|| AnalyzeError::Invalid("subspace axes are linearly dependent".into()))?;
    Ok(Matrix::from_rows(&basis))
}

/// Input weight columns for the noise streams of a context model.
pub fn input_axes(theta: &CellParams, columns: &[usize]) -> Vec<Vec<f64>> {
    let v = match &theta.weights {
        CellWeights::Vanilla(a) => &a.v,
        CellWeights::Gru { candidate, .. } => &candidate.v,
    };
    columns.iter().map(|&c| v.column(c)).collect()
}

/// Coordinates of each row of `states` (`N x D`) in an orthonormal `basis` (`k x D`).
pub fn project(states: &Matrix, basis: &Matrix) -> Matrix {
    Matrix::product(states, false, basis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `k x D`, orthonormal rows.
    pub components: Matrix,
    /// `N x k`.
    pub coords: Matrix,
    pub mean: Vec<f64>,
    pub explained_variance: Vec<f64>,
    /// Fraction of total variance per component.
    pub explained_ratio: Vec<f64>,
}

/// Top-`k` principal components of the rows of `states`.
pub fn pca_project(states: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = states.shape();
    if n <= k || k == 0 || k > d {
        return Err(AnalyzeError::Invalid(format!("PCA needs N > k and 0 < k <= D (N={n}, D={d}, k={k})")));
    }
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| states.get(r, c)).sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_fn(n, d, |r, c| states.get(r, c) - mean[c]);
    let mut cov = Matrix::product(&centered, true, &centered, false);
    cov.scale_assign(1.0 / (n - 1) as f64);
    let (values, vectors) = sym_eig(&cov)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let components = vectors.slice_rows(0, k);
    let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
    let explained_ratio = explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(Pca { coords: project(&centered, &components), components, mean, explained_variance, explained_ratio })
}
