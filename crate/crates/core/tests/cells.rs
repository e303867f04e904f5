use jslds_core::cells::{Affine, CellKind, CellParams, CellWeights, ParamSet};
use jslds_core::diffcore::Tape;
use jslds_core::matrix::Matrix;
use jslds_core::rng::from_seed;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_cell(kind: CellKind, rng: &mut ChaCha8Rng) -> CellParams {
    let d = rng.random_range(1..=6);
    let u = rng.random_range(1..=4);
    let o = rng.random_range(1..=3);
    let mut theta = CellParams::init(kind, d, u, o, rng);
    for m in theta.tensors_mut() {
        if m.rows() == 1 {
            m.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
    theta
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Column `j` of the central-difference Jacobian of `f` at `x`.
fn fd_column(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], j: usize, step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    p[j] += step;
    let plus = f(&p);
    p[j] -= 2.0 * step;
    let minus = f(&p);
    plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect()
}

fn assert_matches_fd(analytic: &Matrix, f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], what: &str) {
    for j in 0..x.len() {
        let col = fd_column(f, x, j, 1e-6);
        for (i, &n) in col.iter().enumerate() {
            let a = analytic.get(i, j);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(err <= 1e-5, "{what}[{i},{j}]: analytic {a} vs fd {n}");
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Independent scalar-loop GRU update with `(1 - z) h + z c`.
fn gru_oracle(update: &Affine, reset: &Affine, cand: &Affine, h: &[f64], u: &[f64]) -> Vec<f64> {
    let pre = |a: &Affine, x: &[f64], i: usize| -> f64 {
        let mut s = a.b.get(0, i);
        for (j, xj) in x.iter().enumerate() {
            s += a.w.get(i, j) * xj;
        }
        for (j, uj) in u.iter().enumerate() {
            s += a.v.get(i, j) * uj;
        }
        s
    };
    let d = h.len();
    let r: Vec<f64> = (0..d).map(|i| sigmoid(pre(reset, h, i))).collect();
    let rh: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).collect();
    (0..d)
        .map(|i| {
            let z = sigmoid(pre(update, h, i));
            let c = pre(cand, &rh, i).tanh();
            (1.0 - z) * h[i] + z * c
        })
        .collect()
}

#[test]
fn vanilla_zero_weights_map_to_origin() {
    let theta = CellParams::zeros(CellKind::Vanilla, 3, 2, 1);
    assert_eq!(theta.forward(&[0.3, -2.0, 5.0], &[1.0, 1.0]).unwrap(), vec![0.0; 3]);
}

#[test]
fn scalar_vanilla_step() {
    let mut theta = CellParams::zeros(CellKind::Vanilla, 1, 1, 1);
    theta.weights = CellWeights::Vanilla(Affine { w: Matrix::filled(1, 1, 2.0), v: Matrix::zeros(1, 1), b: Matrix::zeros(1, 1) });
    let h = theta.forward(&[0.5], &[0.0]).unwrap();
    assert!((h[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
}

#[test]
fn gru_closed_update_gate_passes_state_through() {
    let (d, u) = (4, 2);
    let mut theta = CellParams::zeros(CellKind::Gru, d, u, 1);
    if let CellWeights::Gru { update, .. } = &mut theta.weights {
        update.b = Matrix::filled(1, d, -60.0);
    }
    let h = [0.3, -0.9, 0.0, 0.7];
    let out = theta.forward(&h, &[1.0, -1.0]).unwrap();
    for (a, b) in out.iter().zip(&h) {
        assert!((a - b).abs() < 1e-15, "{out:?}");
    }
}

#[test]
fn gru_forward_matches_scalar_oracle() {
    let mut rng = from_seed(21);
    for _ in 0..20 {
        let theta = random_cell(CellKind::Gru, &mut rng);
        let CellWeights::Gru { update, reset, candidate } = &theta.weights else { unreachable!() };
        let h = random_vec(theta.state_dim, &mut rng);
        let u = random_vec(theta.input_dim, &mut rng);
        let expect = gru_oracle(update, reset, candidate, &h, &u);
        for (a, b) in theta.forward(&h, &u).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_cases() {
    let mut theta = CellParams::zeros(CellKind::Vanilla, 3, 1, 2);
    theta.readout_w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(theta.readout_value(&[0.25, -1.0, 7.0]).unwrap(), vec![0.25, 7.0]);
    theta.readout_b = Matrix::row_vector(&[0.5, -2.0]);
    assert_eq!(theta.readout_value(&[0.0; 3]).unwrap(), vec![0.5, -2.0]);

    let mut rng = from_seed(4);
    let theta = random_cell(CellKind::Vanilla, &mut rng);
    let mut theta = theta;
    theta.readout_b = Matrix::row_vector(&random_vec(theta.output_dim, &mut rng));
    let s = random_vec(theta.state_dim, &mut rng);
    let got = theta.readout_value(&s).unwrap();
    for (o, g) in got.iter().enumerate() {
        let mut want = theta.readout_b.get(0, o);
        for (k, sk) in s.iter().enumerate() {
            want += theta.readout_w.get(o, k) * sk;
        }
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn vanilla_jacobians_at_origin_are_the_weights() {
    let mut rng = from_seed(5);
    let mut theta = random_cell(CellKind::Vanilla, &mut rng);
    let (d, u) = (theta.state_dim, theta.input_dim);
    if let CellWeights::Vanilla(a) = &mut theta.weights {
        a.b = Matrix::zeros(1, d);
    }
    let CellWeights::Vanilla(a) = theta.weights.clone() else { unreachable!() };
    let (jr, ji) = theta.jacobians(&vec![0.0; d], &vec![0.0; u]).unwrap();
    assert_eq!(jr, a.w);
    assert_eq!(ji, a.v);

    if let CellWeights::Vanilla(a) = &mut theta.weights {
        a.v = Matrix::zeros(d, u);
    }
    let ji = theta.input_jacobian(&random_vec(d, &mut rng), &random_vec(u, &mut rng)).unwrap();
    assert_eq!(ji, Matrix::zeros(d, u));
}

#[test]
fn saturated_vanilla_jacobian_vanishes() {
    let mut theta = CellParams::zeros(CellKind::Vanilla, 2, 1, 1);
    theta.weights = CellWeights::Vanilla(Affine { w: Matrix::filled(2, 2, 30.0), v: Matrix::zeros(2, 1), b: Matrix::zeros(1, 2) });
    let jr = theta.rec_jacobian(&[1.0, 1.0], &[0.0]).unwrap();
    assert!(jr.max_abs() < 1e-20);
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = from_seed(6);
    for kind in [CellKind::Vanilla, CellKind::Gru] {
        for _ in 0..25 {
            let theta = random_cell(kind, &mut rng);
            let h = random_vec(theta.state_dim, &mut rng);
            let u = random_vec(theta.input_dim, &mut rng);
            let (jr, ji) = theta.jacobians(&h, &u).unwrap();
            assert_matches_fd(&jr, &|x| theta.forward(x, &u).unwrap(), &h, "rec");
            assert_matches_fd(&ji, &|x| theta.forward(&h, x).unwrap(), &u, "inp");
        }
    }
}

#[test]
fn linearization_residual_is_second_order() {
    let mut rng = from_seed(7);
    for kind in [CellKind::Vanilla, CellKind::Gru] {
        for _ in 0..10 {
            let theta = random_cell(kind, &mut rng);
            let h = random_vec(theta.state_dim, &mut rng);
            let u = random_vec(theta.input_dim, &mut rng);
            let f0 = theta.forward(&h, &u).unwrap();
            let jr = theta.rec_jacobian(&h, &u).unwrap();
            let dir = random_vec(theta.state_dim, &mut rng);
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let residual = |eps: f64| -> f64 {
                let delta: Vec<f64> = dir.iter().map(|x| eps * x / n).collect();
                let hp: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let f = theta.forward(&hp, &u).unwrap();
                let lin = jr.mul_vec(&delta);
                f.iter().zip(&f0).zip(&lin).map(|((a, b), c)| (a - b - c).powi(2)).sum::<f64>().sqrt()
            };
            let ratio = residual(1e-2) / residual(5e-3);
            assert!((3.0..=5.0).contains(&ratio), "{kind}: ratio {ratio}");
        }
    }
}

/// `sum ||J_rec||^2` on the tape, differentiated with respect to every cell parameter.
#[test]
fn gradient_flows_through_the_jacobian() {
    let mut rng = from_seed(8);
    for kind in [CellKind::Vanilla, CellKind::Gru] {
        for _ in 0..5 {
            let theta = random_cell(kind, &mut rng);
            let h = random_vec(theta.state_dim, &mut rng);
            let u = random_vec(theta.input_dim, &mut rng);
            let mut tape = Tape::new();
            let vars = theta.register(&mut tape).unwrap();
            let hp = tape.constant(Matrix::row_vector(&h)).unwrap();
            let up = tape.constant(Matrix::row_vector(&u)).unwrap();
            let lin = vars.linearize(&mut tape, hp, up).unwrap();
            let j = lin.rec_jacobian(&mut tape).unwrap();
            let root = tape.sum_squares(j).unwrap();
            let grads = tape.backward(root).unwrap();
            let analytic: Vec<Matrix> = vars.vars().iter().map(|&v| grads.wrt(v)).collect();

            let value = |t: &CellParams| t.rec_jacobian(&h, &u).unwrap().sum_squares();
            for (k, g) in analytic.iter().enumerate() {
                for i in 0..g.len() {
                    let mut p = theta.clone();
                    let step = 1e-6;
                    p.tensors_mut()[k].as_mut_slice()[i] += step;
                    let plus = value(&p);
                    p.tensors_mut()[k].as_mut_slice()[i] -= 2.0 * step;
                    let minus = value(&p);
                    let n = (plus - minus) / (2.0 * step);
                    let a = g.as_slice()[i];
                    let diff = (a - n).abs();
                    assert!(diff <= 1e-8 || diff / a.abs().max(n.abs()) <= 1e-4, "{kind} tensor {k}[{i}]: {a} vs {n}");
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn params_round_trip_bit_exactly(seed in any::<u64>(), gru in any::<bool>()) {
        let mut rng = from_seed(seed);
        let kind = if gru { CellKind::Gru } else { CellKind::Vanilla };
        let theta = random_cell(kind, &mut rng);
        let back: CellParams = serde_json::from_str(&serde_json::to_string(&theta).unwrap()).unwrap();
        for (a, b) in theta.tensors().iter().zip(back.tensors()) {
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back, theta);
    }

    #[test]
    fn forward_stays_in_the_unit_box(seed in any::<u64>(), gru in any::<bool>()) {
        let mut rng = from_seed(seed);
        let kind = if gru { CellKind::Gru } else { CellKind::Vanilla };
        let theta = random_cell(kind, &mut rng);
        let h = random_vec(theta.state_dim, &mut rng);
        let u: Vec<f64> = (0..theta.input_dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        for x in theta.forward(&h, &u).unwrap() {
            prop_assert!(x.abs() <= 1.0);
        }
    }
}
