//! Central finite-difference checks of the co-training gradients.
//!
//! Used by the test suites; exposed so the CLI and downstream code can run the
//! same oracle on their own instances.

use crate::cells::{gaussian, CellKind, CellParams, ParamSet};
use crate::diffcore::Result;
use crate::jslds::{evaluate_loss, gradients, ExpansionParams, LossWeights};
use crate::matrix::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A small random co-training problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub theta: CellParams,
    pub phi: ExpansionParams,
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    pub u_star: Matrix,
    pub weights: LossWeights,
}

fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

impl Instance {
    /// Random instance with `D <= 6`, `U <= 4`, `O <= 3`, `T <= 5` and a batch
    /// of at most 3. Biases are drawn nonzero so every parameter matters.
    pub fn random<R: Rng + ?Sized>(kind: CellKind, rng: &mut R) -> Self {
        let d = rng.random_range(1..=6);
        let u = rng.random_range(1..=4);
        let o = rng.random_range(1..=3);
        let t = rng.random_range(1..=5);
        let b = rng.random_range(1..=3);
        let mut theta = CellParams::init(kind, d, u, o, rng);
        for m in theta.tensors_mut() {
            if m.rows() == 1 {
                *m = normal(1, m.cols(), 0.5, rng);
            }
        }
        let phi = ExpansionParams {
            w1: gaussian(d, d, rng),
            b1: normal(1, d, 0.5, rng),
            w2: gaussian(d, d, rng),
            b2: normal(1, d, 0.5, rng),
        };
        Instance {
            theta,
            phi,
            inputs: (0..t).map(|_| normal(b, u, 1.0, rng)).collect(),
            targets: (0..t).map(|_| normal(b, o, 1.0, rng)).collect(),
            u_star: normal(b, u, 0.5, rng),
            weights: LossWeights::new(
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(1.0..100.0),
                rng.random_range(1.0..10.0),
            ),
        }
    }

    pub fn loss(&self) -> Result<f64> {
        evaluate_loss(&self.theta, &self.phi, &self.inputs, &self.targets, &self.u_star, &self.weights).map(|v| v.total)
    }

    pub fn num_params(&self) -> usize {
        self.theta.num_params() + self.phi.num_params()
    }

    fn perturb(&mut self, index: usize, delta: f64) {
        let mut i = index;
        for m in self.theta.tensors_mut().into_iter().chain(self.phi.tensors_mut()) {
            if i < m.len() {
                m.as_mut_slice()[i] += delta;
                return;
            }
            i -= m.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Central difference of the total loss along parameter `index`.
    pub fn numeric_grad(&self, index: usize, step: f64) -> Result<f64> {
        let mut probe = self.clone();
        probe.perturb(index, step);
        let plus = probe.loss()?;
        probe.perturb(index, -2.0 * step);
        let minus = probe.loss()?;
        Ok((plus - minus) / (2.0 * step))
    }

    /// Tape gradient, flattened in the same order as [`Instance::numeric_grad`] indices.
    pub fn analytic_grad(&self) -> Result<Vec<f64>> {
        let (_, grads) = gradients(&self.theta, &self.phi, &self.inputs, &self.targets, &self.u_star, &self.weights)?;
        Ok(grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect())
    }
}

/// Outcome of comparing analytic and numeric gradients element by element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among elements above the absolute floor.
    pub max_rel_error: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// An element passes when `|a - n| <= abs_floor` or `|a - n| / max(|a|, |n|) <= rel_tol`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> Comparison {
    let mut out = Comparison { checked: 0, failures: 0, max_rel_error: 0.0 };
    for (&a, &n) in analytic.iter().zip(numeric) {
        out.checked += 1;
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        out.max_rel_error = out.max_rel_error.max(rel);
        if !(rel <= rel_tol) {
            out.failures += 1;
        }
    }
    out
}

/// Checks every parameter of `instance` with central differences of size `step`.
pub fn check_instance(instance: &Instance, step: f64, rel_tol: f64, abs_floor: f64) -> Result<Comparison> {
    let analytic = instance.analytic_grad()?;
    let numeric = (0..instance.num_params())
        .map(|i| instance.numeric_grad(i, step))
        .collect::<Result<Vec<_>>>()?;
    Ok(compare(&analytic, &numeric, rel_tol, abs_floor))
}
