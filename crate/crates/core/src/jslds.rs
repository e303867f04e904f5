//! Expansion network, switching linear update and the co-training loss.
//!
//! The JSLDS state evolves as
//!
//! ```text
//! e*_t = E(a_{t-1})
//! a_t  = e*_t + J_rec(e*_t, u*) (a_{t-1} - e*_t) + J_inp(e*_t, u*) (u_t - u*)
//! ```
//!
//! with `E` a two-layer tanh MLP of width `D`. The RNN and JSLDS streams share
//! the cell weights but never exchange state during a rollout.

use crate::cells::{gaussian, CellParams, CellVars, Linearization, ParamSet};
use crate::diffcore::{DiffError, Result, Tape, Var};
use crate::matrix::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weights `phi` of the expansion network `E(a) = tanh(W2 tanh(W1 a + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ExpansionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        ExpansionParams {
            w1: gaussian(d, d, rng),
            b1: Matrix::zeros(1, d),
            w2: gaussian(d, d, rng),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        ExpansionParams {
            w1: Matrix::zeros(d, d),
            b1: Matrix::zeros(1, d),
            w2: Matrix::zeros(d, d),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn validate(&self, d: usize) -> std::result::Result<(), String> {
        for (name, m, shape) in [
            ("expansion.w1", &self.w1, (d, d)),
            ("expansion.b1", &self.b1, (1, d)),
            ("expansion.w2", &self.w2, (d, d)),
            ("expansion.b2", &self.b2, (1, d)),
        ] {
            if m.shape() != shape {
                return Err(format!("{name} has shape {:?}, expected {:?}", m.shape(), shape));
            }
            if !m.is_finite() {
                return Err(format!("{name} has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ExpansionVars> {
        Ok(ExpansionVars {
            w1: tape.param(self.w1.clone())?,
            b1: tape.param(self.b1.clone())?,
            w2: tape.param(self.w2.clone())?,
            b2: tape.param(self.b2.clone())?,
        })
    }

    pub fn register_constant(&self, tape: &mut Tape) -> Result<ExpansionVars> {
        Ok(ExpansionVars {
            w1: tape.constant(self.w1.clone())?,
            b1: tape.constant(self.b1.clone())?,
            w2: tape.constant(self.w2.clone())?,
            b2: tape.constant(self.b2.clone())?,
        })
    }

    /// `E(a_prev)` on a plain vector.
    pub fn forward(&self, a_prev: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register_constant(&mut tape)?;
        let a = tape.constant(Matrix::row_vector(a_prev))?;
        let e = vars.forward(&mut tape, a)?;
        Ok(tape.value(e).as_slice().to_vec())
    }
}

impl ParamSet for ExpansionParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpansionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExpansionVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Row-wise `E(a_prev)` for a batch `a_prev` (B x D).
    pub fn forward(&self, tape: &mut Tape, a_prev: Var) -> Result<Var> {
        let z1 = tape.matmul_nt(a_prev, self.w1)?;
        let z1 = tape.add_row(z1, self.b1)?;
        let h1 = tape.tanh(z1)?;
        let z2 = tape.matmul_nt(h1, self.w2)?;
        let z2 = tape.add_row(z2, self.b2)?;
        tape.tanh(z2)
    }
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rnn: f64,
    pub jslds: f64,
    pub e: f64,
    pub a: f64,
}

impl LossWeights {
    pub fn new(rnn: f64, jslds: f64, e: f64, a: f64) -> Self {
        LossWeights { rnn, jslds, e, a }
    }

    /// Plain RNN training: only the RNN task loss is active.
    pub fn rnn_only() -> Self {
        LossWeights { rnn: 1.0, jslds: 0.0, e: 0.0, a: 0.0 }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("lambda_rnn", self.rnn), ("lambda_jslds", self.jslds), ("lambda_e", self.e), ("lambda_a", self.a)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Whether any term depends on the JSLDS stream.
    pub fn uses_jslds(&self) -> bool {
        self.jslds != 0.0 || self.e != 0.0 || self.a != 0.0
    }
}

/// Output of one switching linear step on the tape.
#[derive(Debug, Clone, Copy)]
pub struct JsldsStep {
    pub a: Var,
    pub e_star: Var,
    /// `F(e*, u*)`, kept for the fixed-point regularizer.
    pub f_at_e: Var,
}

/// One JSLDS update for a batch of rows.
pub fn jslds_step(
    tape: &mut Tape,
    cell: &CellVars,
    expansion: &ExpansionVars,
    a_prev: Var,
    u_t: Var,
    u_star: Var,
) -> Result<JsldsStep> {
    let e_star = expansion.forward(tape, a_prev)?;
    let lin: Linearization = cell.linearize(tape, e_star, u_star)?;
    let da = tape.sub(a_prev, e_star)?;
    let du = tape.sub(u_t, u_star)?;
    let rec = lin.jvp_state(tape, da)?;
    let inp = lin.jvp_input(tape, du)?;
    let a = tape.add(e_star, rec)?;
    let a = tape.add(a, inp)?;
    if !tape.value(a).is_finite() {
        return Err(DiffError::NonFinite { op: "jslds_step" });
    }
    Ok(JsldsStep { a, e_star, f_at_e: lin.value() })
}

/// Tape handles for a batched co-rollout. Every per-timestep entry is `B x D`
/// (states) or `B x O` (outputs).
#[derive(Debug, Clone, Default)]
pub struct TapeRollout {
    pub h: Vec<Var>,
    pub rnn_out: Vec<Var>,
    /// Empty when the JSLDS stream was not requested.
    pub a: Vec<Var>,
    pub e_star: Vec<Var>,
    pub f_at_e: Vec<Var>,
    pub jslds_out: Vec<Var>,
}

/// Runs both streams over time-major `inputs` (each `B x U`) from zero states.
pub fn co_rollout_tape(
    tape: &mut Tape,
    cell: &CellVars,
    expansion: Option<&ExpansionVars>,
    inputs: &[Var],
    u_star: Var,
) -> Result<TapeRollout> {
    let batch = tape.shape(u_star).0;
    let d = cell.state_dim;
    let mut out = TapeRollout::default();
    let zero = tape.constant(Matrix::zeros(batch, d))?;
    let mut h = zero;
    let mut a = zero;
    for &u in inputs {
        h = cell.step(tape, h, u)?;
        out.h.push(h);
        out.rnn_out.push(cell.readout(tape, h)?);
        if let Some(exp) = expansion {
            let step = jslds_step(tape, cell, exp, a, u, u_star)?;
            a = step.a;
            out.a.push(a);
            out.e_star.push(step.e_star);
            out.f_at_e.push(step.f_at_e);
            out.jslds_out.push(cell.readout(tape, a)?);
        }
    }
    Ok(out)
}

/// `sum_t ||x_t - y_t||^2 / scale` on the tape.
fn summed_sq_diff(tape: &mut Tape, xs: &[Var], ys: &[Var], scale: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        let d = tape.sub(x, y)?;
        terms.push(tape.sum_squares(d)?);
    }
    match tape.add_all(&terms)? {
        Some(s) => tape.scale(s, 1.0 / scale),
        None => tape.constant(Matrix::zeros(1, 1)),
    }
}

/// Mean squared error over batch, time and output channels.
pub fn task_loss(tape: &mut Tape, outputs: &[Var], targets: &[Var]) -> Result<Var> {
    let count = outputs
        .first()
        .map_or(1, |&o| tape.value(o).len() * outputs.len())
        .max(1);
    summed_sq_diff(tape, outputs, targets, count as f64)
}

/// `R_e = sum_t ||e*_t - F(e*_t, u*)||^2`, averaged over the batch.
pub fn reg_e(tape: &mut Tape, rollout: &TapeRollout) -> Result<Var> {
    let batch = rollout.e_star.first().map_or(1, |&e| tape.shape(e).0).max(1);
    summed_sq_diff(tape, &rollout.e_star, &rollout.f_at_e, batch as f64)
}

/// `R_a = sum_t ||a_t - h_t||^2`, averaged over the batch.
pub fn reg_a(tape: &mut Tape, rollout: &TapeRollout) -> Result<Var> {
    let batch = rollout.a.first().map_or(1, |&a| tape.shape(a).0).max(1);
    summed_sq_diff(tape, &rollout.a, &rollout.h, batch as f64)
}

/// Individual loss terms and their weighted sum, all on the tape. Terms that
/// were not computed (JSLDS stream skipped) are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l_rnn: Var,
    pub l_jslds: Option<Var>,
    pub r_e: Option<Var>,
    pub r_a: Option<Var>,
}

/// Plain values of the loss terms; skipped terms are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub l_rnn: f64,
    pub l_jslds: f64,
    pub r_e: f64,
    pub r_a: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Option<Var>| v.map_or(f64::NAN, |v| tape.scalar(v));
        LossValues {
            total: tape.scalar(self.total),
            l_rnn: tape.scalar(self.l_rnn),
            l_jslds: get(self.l_jslds),
            r_e: get(self.r_e),
            r_a: get(self.r_a),
        }
    }
}

/// Weighted sum `lambda_rnn L_RNN + lambda_jslds L_JSLDS + lambda_e R_e + lambda_a R_a`.
pub fn combine(tape: &mut Tape, weights: &LossWeights, l_rnn: Var, l_jslds: Option<Var>, r_e: Option<Var>, r_a: Option<Var>) -> Result<LossTerms> {
    let mut terms = vec![tape.scale(l_rnn, weights.rnn)?];
    for (term, w) in [(l_jslds, weights.jslds), (r_e, weights.e), (r_a, weights.a)] {
        if let Some(t) = term {
            terms.push(tape.scale(t, w)?);
        }
    }
    let total = tape.add_all(&terms)?.expect("at least the RNN term");
    Ok(LossTerms { total, l_rnn, l_jslds, r_e, r_a })
}

/// Builds the full co-training loss for time-major `inputs`/`targets` on `tape`.
/// The JSLDS stream is only recorded when `expansion` is given.
pub fn total_loss(
    tape: &mut Tape,
    cell: &CellVars,
    expansion: Option<&ExpansionVars>,
    inputs: &[Var],
    targets: &[Var],
    u_star: Var,
    weights: &LossWeights,
) -> Result<(LossTerms, TapeRollout)> {
    if tape.shape(u_star).0 == 0 {
        return Err(DiffError::ShapeMismatch { op: "total_loss (empty batch)", lhs: tape.shape(u_star), rhs: (1, 0) });
    }
    let rollout = co_rollout_tape(tape, cell, expansion, inputs, u_star)?;
    let l_rnn = task_loss(tape, &rollout.rnn_out, targets)?;
    let (l_jslds, r_e, r_a) = if expansion.is_some() {
        (
            Some(task_loss(tape, &rollout.jslds_out, targets)?),
            Some(reg_e(tape, &rollout)?),
            Some(reg_a(tape, &rollout)?),
        )
    } else {
        (None, None, None)
    };
    let terms = combine(tape, weights, l_rnn, l_jslds, r_e, r_a)?;
    Ok((terms, rollout))
}

/// Loss values and gradients of the total loss, in [`ParamSet::tensors`] order
/// for `theta` followed by `phi`. When `weights` leave the JSLDS stream unused it
/// is not recorded and the `phi` gradients are zero.
pub fn gradients(
    theta: &CellParams,
    phi: &ExpansionParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    u_star: &Matrix,
    weights: &LossWeights,
) -> Result<(LossValues, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let cell = theta.register(&mut tape)?;
    let exp = if weights.uses_jslds() { Some(phi.register(&mut tape)?) } else { None };
    let us = tape.constant(u_star.clone())?;
    let xs = inputs.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let ys = targets.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let (terms, _) = total_loss(&mut tape, &cell, exp.as_ref(), &xs, &ys, us, weights)?;
    let grads = tape.backward(terms.total)?;
    let mut out: Vec<Matrix> = cell.vars().into_iter().map(|v| grads.wrt(v)).collect();
    match exp {
        Some(e) => out.extend(e.vars().into_iter().map(|v| grads.wrt(v))),
        None => out.extend(phi.tensors().into_iter().map(|m| Matrix::zeros(m.rows(), m.cols()))),
    }
    Ok((terms.values(&tape), out))
}

/// Per-trial trajectory of both streams with plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTrajectory {
    pub u_star: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub e_star: Vec<Vec<f64>>,
    pub rnn_out: Vec<Vec<f64>>,
    pub jslds_out: Vec<Vec<f64>>,
}

impl CoTrajectory {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Co-rollout of a batch of trials without recording gradients.
///
/// `inputs` is time-major (`inputs[t]` is `B x U`), `u_star` is `B x U`.
/// Returns one [`CoTrajectory`] per trial.
pub fn co_rollout(theta: &CellParams, phi: &ExpansionParams, inputs: &[Matrix], u_star: &Matrix) -> Result<Vec<CoTrajectory>> {
    let mut tape = Tape::new();
    let cell = theta.register_constant(&mut tape)?;
    let exp = phi.register_constant(&mut tape)?;
    let us = tape.constant(u_star.clone())?;
    let mut xs = Vec::with_capacity(inputs.len());
    for u in inputs {
        xs.push(tape.constant(u.clone())?);
    }
    let roll = co_rollout_tape(&mut tape, &cell, Some(&exp), &xs, us)?;
    let batch = u_star.rows();
    let rows = |vars: &[Var], b: usize| -> Vec<Vec<f64>> { vars.iter().map(|&v| tape.value(v).row(b).to_vec()).collect() };
    Ok((0..batch)
        .map(|b| CoTrajectory {
            u_star: u_star.row(b).to_vec(),
            h: rows(&roll.h, b),
            a: rows(&roll.a, b),
            e_star: rows(&roll.e_star, b),
            rnn_out: rows(&roll.rnn_out, b),
            jslds_out: rows(&roll.jslds_out, b),
        })
        .collect())
}

/// RNN states only, time-major (`out[t]` is `B x D`).
pub fn rnn_states(theta: &CellParams, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    let batch = inputs.first().map_or(0, Matrix::rows);
    let mut tape = Tape::new();
    let cell = theta.register_constant(&mut tape)?;
    let mut h = tape.constant(Matrix::zeros(batch, theta.state_dim))?;
    let mut out = Vec::with_capacity(inputs.len());
    for u in inputs {
        let u = tape.constant(u.clone())?;
        h = cell.step(&mut tape, h, u)?;
        out.push(tape.value(h).clone());
    }
    Ok(out)
}

/// Value of the loss terms for a batch, without gradients.
pub fn evaluate_loss(
    theta: &CellParams,
    phi: &ExpansionParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    u_star: &Matrix,
    weights: &LossWeights,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let cell = theta.register_constant(&mut tape)?;
    let exp = phi.register_constant(&mut tape)?;
    let us = tape.constant(u_star.clone())?;
    let xs = inputs.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let ys = targets.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let (terms, _) = total_loss(&mut tape, &cell, Some(&exp), &xs, &ys, us, weights)?;
    Ok(terms.values(&tape))
}

/// Convenience used by tests and analyses: all trainable values of `(theta, phi)` flattened.
pub fn flatten(theta: &CellParams, phi: &ExpansionParams) -> Vec<f64> {
    theta
        .tensors()
        .into_iter()
        .chain(phi.tensors())
        .flat_map(|m| m.as_slice().iter().copied())
        .collect()
}
