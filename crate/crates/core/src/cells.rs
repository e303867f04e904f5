//! Vanilla tanh and GRU cells with a linear readout.
//!
//! Besides the update map `F(h, u)`, each cell exposes its recurrent and input
//! Jacobians in closed form. They are built from ordinary tape operations, so
//! any loss that uses them can be differentiated back into the cell weights.
//! The JSLDS update only needs Jacobian-vector products, which
//! [`Linearization::jvp_state`] and [`Linearization::jvp_input`] evaluate in
//! `O(D^2)` per row instead of materializing the `D x D` matrix.
//!
//! GRU convention:
//!
//! ```text
//! z = sigmoid(W_z h + V_z u + b_z)
//! r = sigmoid(W_r h + V_r u + b_r)
//! c = tanh(W_c (r * h) + V_c u + b_c)
//! F = (1 - z) * h + z * c
//! ```

use crate::diffcore::{DiffError, Result, Tape, Var};
use crate::matrix::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(CellKind::Vanilla),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!("unknown cell kind `{other}` (expected vanilla or gru)")),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Gru => "gru",
        })
    }
}

/// Anything that owns a fixed, ordered list of trainable matrices.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|m| m.sum_squares()).sum()
    }
}

/// Recurrent weights `W` (D x D), input weights `V` (D x U) and bias `b` (1 x D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub v: Matrix,
    pub b: Matrix,
}

impl Affine {
    pub fn zeros(d: usize, u: usize) -> Self {
        Affine { w: Matrix::zeros(d, d), v: Matrix::zeros(d, u), b: Matrix::zeros(1, d) }
    }

    fn random<R: Rng + ?Sized>(d: usize, u: usize, rng: &mut R) -> Self {
        Affine { w: gaussian(d, d, rng), v: gaussian(d, u, rng), b: Matrix::zeros(1, d) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellWeights {
    Vanilla(Affine),
    Gru { update: Affine, reset: Affine, candidate: Affine },
}

/// All trainable parameters of one cell plus its affine readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub weights: CellWeights,
    /// Readout matrix `C` (O x D).
    pub readout_w: Matrix,
    /// Readout offset `d` (1 x O).
    pub readout_b: Matrix,
}

/// Gaussian entries with standard deviation `1/sqrt(fan_in)`, fan-in being the column count.
pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

impl CellParams {
    pub fn init<R: Rng + ?Sized>(kind: CellKind, d: usize, u: usize, o: usize, rng: &mut R) -> Self {
        let weights = match kind {
            CellKind::Vanilla => CellWeights::Vanilla(Affine::random(d, u, rng)),
            CellKind::Gru => CellWeights::Gru {
                update: Affine::random(d, u, rng),
                reset: Affine::random(d, u, rng),
                candidate: Affine::random(d, u, rng),
            },
        };
        CellParams {
            state_dim: d,
            input_dim: u,
            output_dim: o,
            weights,
            readout_w: gaussian(o, d, rng),
            readout_b: Matrix::zeros(1, o),
        }
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(kind: CellKind, d: usize, u: usize, o: usize) -> Self {
        let weights = match kind {
            CellKind::Vanilla => CellWeights::Vanilla(Affine::zeros(d, u)),
            CellKind::Gru => CellWeights::Gru {
                update: Affine::zeros(d, u),
                reset: Affine::zeros(d, u),
                candidate: Affine::zeros(d, u),
            },
        };
        CellParams {
            state_dim: d,
            input_dim: u,
            output_dim: o,
            weights,
            readout_w: Matrix::zeros(o, d),
            readout_b: Matrix::zeros(1, o),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self.weights {
            CellWeights::Vanilla(_) => CellKind::Vanilla,
            CellWeights::Gru { .. } => CellKind::Gru,
        }
    }

    /// Checks dimensions and finiteness; returns a description of the first problem.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let (d, u, o) = (self.state_dim, self.input_dim, self.output_dim);
        if d == 0 || u == 0 || o == 0 {
            return Err(format!("dimensions must be positive, got D={d} U={u} O={o}"));
        }
        let check = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(format!("{name} has shape {:?}, expected {:?}", m.shape(), shape))
            } else if !m.is_finite() {
                Err(format!("{name} has non-finite entries"))
            } else {
                Ok(())
            }
        };
        let affine = |prefix: &str, a: &Affine| {
            check(&format!("{prefix}.w"), &a.w, (d, d))?;
            check(&format!("{prefix}.v"), &a.v, (d, u))?;
            check(&format!("{prefix}.b"), &a.b, (1, d))
        };
        match &self.weights {
            CellWeights::Vanilla(a) => affine("vanilla", a)?,
            CellWeights::Gru { update, reset, candidate } => {
                affine("update", update)?;
                affine("reset", reset)?;
                affine("candidate", candidate)?;
            }
        }
        check("readout_w", &self.readout_w, (o, d))?;
        check("readout_b", &self.readout_b, (1, o))
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<CellVars> {
        self.place(tape, true)
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn register_constant(&self, tape: &mut Tape) -> Result<CellVars> {
        self.place(tape, false)
    }

    fn place(&self, tape: &mut Tape, trainable: bool) -> Result<CellVars> {
        let mut put = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let mut affine = |a: &Affine| -> Result<AffineVars> { Ok(AffineVars { w: put(&a.w)?, v: put(&a.v)?, b: put(&a.b)? }) };
        let core = match &self.weights {
            CellWeights::Vanilla(a) => CoreVars::Vanilla(affine(a)?),
            CellWeights::Gru { update, reset, candidate } => CoreVars::Gru {
                update: affine(update)?,
                reset: affine(reset)?,
                candidate: affine(candidate)?,
            },
        };
        let readout_w = put(&self.readout_w)?;
        let readout_b = put(&self.readout_b)?;
        Ok(CellVars { state_dim: self.state_dim, input_dim: self.input_dim, core, readout_w, readout_b })
    }

    /// One update `F(h, u)` on plain vectors.
    pub fn forward(&self, h: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register_constant(&mut tape)?;
        let h = tape.constant(Matrix::row_vector(h))?;
        let u = tape.constant(Matrix::row_vector(u))?;
        let out = vars.step(&mut tape, h, u)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    /// `C * state + d` on a plain vector.
    pub fn readout_value(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(DiffError::ShapeMismatch {
                op: "readout",
                lhs: (1, state.len()),
                rhs: self.readout_w.shape(),
            });
        }
        Ok(self
            .readout_w
            .mul_vec(state)
            .iter()
            .zip(self.readout_b.as_slice())
            .map(|(a, b)| a + b)
            .collect())
    }

    /// `dF/dh` at `(point, u_star)`.
    pub fn rec_jacobian(&self, point: &[f64], u_star: &[f64]) -> Result<Matrix> {
        self.jacobians(point, u_star).map(|(rec, _)| rec)
    }

    /// `dF/du` at `(point, u_star)`.
    pub fn input_jacobian(&self, point: &[f64], u_star: &[f64]) -> Result<Matrix> {
        self.jacobians(point, u_star).map(|(_, inp)| inp)
    }

    /// Recurrent and input Jacobians at `(point, u_star)` as plain matrices.
    pub fn jacobians(&self, point: &[f64], u_star: &[f64]) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let vars = self.register_constant(&mut tape)?;
        let p = tape.constant(Matrix::row_vector(point))?;
        let us = tape.constant(Matrix::row_vector(u_star))?;
        let lin = vars.linearize(&mut tape, p, us)?;
        let rec = lin.rec_jacobian(&mut tape)?;
        let inp = lin.input_jacobian(&mut tape)?;
        Ok((tape.value(rec).clone(), tape.value(inp).clone()))
    }
}

impl ParamSet for CellParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        match &self.weights {
            CellWeights::Vanilla(a) => out.extend([&a.w, &a.v, &a.b]),
            CellWeights::Gru { update, reset, candidate } => {
                for a in [update, reset, candidate] {
                    out.extend([&a.w, &a.v, &a.b]);
                }
            }
        }
        out.push(&self.readout_w);
        out.push(&self.readout_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        match &mut self.weights {
            CellWeights::Vanilla(a) => out.extend([&mut a.w, &mut a.v, &mut a.b]),
            CellWeights::Gru { update, reset, candidate } => {
                for a in [update, reset, candidate] {
                    out.extend([&mut a.w, &mut a.v, &mut a.b]);
                }
            }
        }
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub v: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum CoreVars {
    Vanilla(AffineVars),
    Gru { update: AffineVars, reset: AffineVars, candidate: AffineVars },
}

/// Tape handles for a [`CellParams`], in [`ParamSet::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub state_dim: usize,
    pub input_dim: usize,
    pub core: CoreVars,
    pub readout_w: Var,
    pub readout_b: Var,
}

/// Quantities cached at a linearization point, enough to apply or build the Jacobians.
#[derive(Debug, Clone, Copy)]
pub enum Linearization {
    Vanilla {
        /// `F(point, u_star)`.
        value: Var,
        /// `1 - F^2`, the tanh derivative at the pre-activation.
        slope: Var,
        weights: AffineVars,
    },
    Gru {
        value: Var,
        point: Var,
        r: Var,
        /// `1 - z`
        keep: Var,
        /// `(c - h) * z * (1 - z)`
        coef_z: Var,
        /// `z * (1 - c^2)`
        coef_c: Var,
        /// `h * r * (1 - r)`
        coef_r: Var,
        update: AffineVars,
        reset: AffineVars,
        candidate: AffineVars,
    },
}

fn preact(tape: &mut Tape, a: &AffineVars, h: Var, u: Var) -> Result<Var> {
    let wh = tape.matmul_nt(h, a.w)?;
    let vu = tape.matmul_nt(u, a.v)?;
    let s = tape.add(wh, vu)?;
    tape.add_row(s, a.b)
}

impl CellVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        match self.core {
            CoreVars::Vanilla(a) => out.extend([a.w, a.v, a.b]),
            CoreVars::Gru { update, reset, candidate } => {
                for a in [update, reset, candidate] {
                    out.extend([a.w, a.v, a.b]);
                }
            }
        }
        out.push(self.readout_w);
        out.push(self.readout_b);
        out
    }

    fn check_dims(&self, tape: &Tape, h: Var, u: Var) -> Result<()> {
        let (hs, us) = (tape.shape(h), tape.shape(u));
        if hs.1 != self.state_dim || us.1 != self.input_dim || hs.0 != us.0 {
            return Err(DiffError::ShapeMismatch { op: "cell", lhs: hs, rhs: us });
        }
        Ok(())
    }

    /// `F(h, u)` for a batch of row states `h` (B x D) and inputs `u` (B x U).
    pub fn step(&self, tape: &mut Tape, h: Var, u: Var) -> Result<Var> {
        self.check_dims(tape, h, u)?;
        match &self.core {
            CoreVars::Vanilla(a) => {
                let z = preact(tape, a, h, u)?;
                tape.tanh(z)
            }
            CoreVars::Gru { update, reset, candidate } => {
                let (z, _, c) = gru_gates(tape, update, reset, candidate, h, u)?;
                gru_combine(tape, h, z, c)
            }
        }
    }

    /// Affine readout `state * C^T + d` for a batch of row states.
    pub fn readout(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let y = tape.matmul_nt(state, self.readout_w)?;
        tape.add_row(y, self.readout_b)
    }

    /// Evaluates `F` at `(point, u_star)` and caches what the Jacobians need.
    pub fn linearize(&self, tape: &mut Tape, point: Var, u_star: Var) -> Result<Linearization> {
        self.check_dims(tape, point, u_star)?;
        match self.core {
            CoreVars::Vanilla(a) => {
                let pre = preact(tape, &a, point, u_star)?;
                let value = tape.tanh(pre)?;
                let sq = tape.hadamard(value, value)?;
                let slope = tape.affine(sq, -1.0, 1.0)?;
                Ok(Linearization::Vanilla { value, slope, weights: a })
            }
            CoreVars::Gru { update, reset, candidate } => {
                let (z, r, c) = gru_gates(tape, &update, &reset, &candidate, point, u_star)?;
                let value = gru_combine(tape, point, z, c)?;
                let keep = tape.affine(z, -1.0, 1.0)?;
                let z_slope = tape.hadamard(z, keep)?;
                let c_minus_h = tape.sub(c, point)?;
                let coef_z = tape.hadamard(c_minus_h, z_slope)?;
                let c_sq = tape.hadamard(c, c)?;
                let c_slope = tape.affine(c_sq, -1.0, 1.0)?;
                let coef_c = tape.hadamard(z, c_slope)?;
                let one_minus_r = tape.affine(r, -1.0, 1.0)?;
                let r_slope = tape.hadamard(r, one_minus_r)?;
                let coef_r = tape.hadamard(point, r_slope)?;
                Ok(Linearization::Gru {
                    value,
                    point,
                    r,
                    keep,
                    coef_z,
                    coef_c,
                    coef_r,
                    update,
                    reset,
                    candidate,
                })
            }
        }
    }
}

fn gru_gates(
    tape: &mut Tape,
    update: &AffineVars,
    reset: &AffineVars,
    candidate: &AffineVars,
    h: Var,
    u: Var,
) -> Result<(Var, Var, Var)> {
    let zp = preact(tape, update, h, u)?;
    let z = tape.sigmoid(zp)?;
    let rp = preact(tape, reset, h, u)?;
    let r = tape.sigmoid(rp)?;
    let rh = tape.hadamard(r, h)?;
    let cp = preact(tape, candidate, rh, u)?;
    let c = tape.tanh(cp)?;
    Ok((z, r, c))
}

fn gru_combine(tape: &mut Tape, h: Var, z: Var, c: Var) -> Result<Var> {
    // (1 - z) h + z c = h + z (c - h)
    let diff = tape.sub(c, h)?;
    let zd = tape.hadamard(z, diff)?;
    tape.add(h, zd)
}

impl Linearization {
    /// `F(point, u_star)`.
    pub fn value(&self) -> Var {
        match *self {
            Linearization::Vanilla { value, .. } | Linearization::Gru { value, .. } => value,
        }
    }

    /// Row-wise `dF/dh * v` for a batch of directions `v` (B x D).
    pub fn jvp_state(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        match *self {
            Linearization::Vanilla { slope, weights, .. } => {
                let wv = tape.matmul_nt(v, weights.w)?;
                tape.hadamard(slope, wv)
            }
            Linearization::Gru { r, keep, coef_z, coef_c, coef_r, update, reset, candidate, .. } => {
                let t1 = tape.hadamard(keep, v)?;
                let zv = tape.matmul_nt(v, update.w)?;
                let t2 = tape.hadamard(coef_z, zv)?;
                let rv = tape.matmul_nt(v, reset.w)?;
                let dr_h = tape.hadamard(coef_r, rv)?;
                let r_v = tape.hadamard(r, v)?;
                let inner = tape.add(r_v, dr_h)?;
                let cv = tape.matmul_nt(inner, candidate.w)?;
                let t3 = tape.hadamard(coef_c, cv)?;
                let s = tape.add(t1, t2)?;
                tape.add(s, t3)
            }
        }
    }

    /// Row-wise `dF/du * w` for a batch of input offsets `w` (B x U).
    pub fn jvp_input(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match *self {
            Linearization::Vanilla { slope, weights, .. } => {
                let vw = tape.matmul_nt(w, weights.v)?;
                tape.hadamard(slope, vw)
            }
            Linearization::Gru { coef_z, coef_c, coef_r, update, reset, candidate, .. } => {
                let zw = tape.matmul_nt(w, update.v)?;
                let t2 = tape.hadamard(coef_z, zw)?;
                let rw = tape.matmul_nt(w, reset.v)?;
                let dr_h = tape.hadamard(coef_r, rw)?;
                let from_r = tape.matmul_nt(dr_h, candidate.w)?;
                let direct = tape.matmul_nt(w, candidate.v)?;
                let cw = tape.add(from_r, direct)?;
                let t3 = tape.hadamard(coef_c, cw)?;
                tape.add(t2, t3)
            }
        }
    }

    fn single_row(&self, tape: &Tape) -> Result<()> {
        let shape = tape.shape(self.value());
        if shape.0 == 1 {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch { op: "jacobian (single point)", lhs: shape, rhs: (1, shape.1) })
        }
    }

    /// Full `D x D` recurrent Jacobian; the linearization must be at a single point.
    pub fn rec_jacobian(&self, tape: &mut Tape) -> Result<Var> {
        self.single_row(tape)?;
        match *self {
            Linearization::Vanilla { slope, weights, .. } => {
                let ds = tape.diag(slope)?;
                tape.matmul(ds, weights.w)
            }
            Linearization::Gru { r, keep, coef_z, coef_c, coef_r, update, reset, candidate, .. } => {
                let d_keep = tape.diag(keep)?;
                let d_cz = tape.diag(coef_z)?;
                let t2 = tape.matmul(d_cz, update.w)?;
                let d_r = tape.diag(r)?;
                let d_cr = tape.diag(coef_r)?;
                let rr = tape.matmul(d_cr, reset.w)?;
                let inner = tape.add(d_r, rr)?;
                let wc_inner = tape.matmul(candidate.w, inner)?;
                let d_cc = tape.diag(coef_c)?;
                let t3 = tape.matmul(d_cc, wc_inner)?;
                let s = tape.add(d_keep, t2)?;
                tape.add(s, t3)
            }
        }
    }

    /// Full `D x U` input Jacobian; the linearization must be at a single point.
    pub fn input_jacobian(&self, tape: &mut Tape) -> Result<Var> {
        self.single_row(tape)?;
        match *self {
            Linearization::Vanilla { slope, weights, .. } => {
                let ds = tape.diag(slope)?;
                tape.matmul(ds, weights.v)
            }
            Linearization::Gru { coef_z, coef_c, coef_r, update, reset, candidate, .. } => {
                let d_cz = tape.diag(coef_z)?;
                let t2 = tape.matmul(d_cz, update.v)?;
                let d_cr = tape.diag(coef_r)?;
                let rv = tape.matmul(d_cr, reset.v)?;
                let from_r = tape.matmul(candidate.w, rv)?;
                let inner = tape.add(from_r, candidate.v)?;
                let d_cc = tape.diag(coef_c)?;
                let t3 = tape.matmul(d_cc, inner)?;
                tape.add(t2, t3)
            }
        }
    }
}
