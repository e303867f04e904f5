use jslds_core::diffcore::{Tape, Var};
use jslds_core::matrix::Matrix;
use jslds_core::rng::from_seed;
use proptest::prelude::*;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = from_seed(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `sum_squares(tanh(W x))` with `W` trainable; returns the root value and dW.
fn tanh_wx(w: &Matrix, x: &Matrix) -> (f64, Matrix) {
    let mut tape = Tape::new();
    let wv = tape.param(w.clone()).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let y = tape.matmul(wv, xv).unwrap();
    let t = tape.tanh(y).unwrap();
    let root = tape.sum_squares(t).unwrap();
    let g = tape.backward(root).unwrap();
    (tape.scalar(root), g.wrt(wv))
}

#[test]
fn tanh_of_linear_map_matches_central_differences() {
    for seed in 0..10 {
        let w = random(3, 3, seed);
        let x = random(3, 1, seed + 100);
        let (_, g) = tanh_wx(&w, &x);
        for i in 0..9 {
            let step = 1e-5;
            let mut p = w.clone();
            p.as_mut_slice()[i] += step;
            let plus = tanh_wx(&p, &x).0;
            p.as_mut_slice()[i] -= 2.0 * step;
            let minus = tanh_wx(&p, &x).0;
            let n = (plus - minus) / (2.0 * step);
            let a = g.as_slice()[i];
            assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1e-6), "seed {seed} [{i}]: {a} vs {n}");
        }
    }
}

#[test]
fn gradients_are_linear_in_the_root() {
    let w = random(4, 2, 1);
    let x = random(2, 3, 2);
    let grad = |alpha: f64, beta: f64| -> Matrix {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone()).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(wv, xv).unwrap();
        let t = tape.tanh(y).unwrap();
        let f = tape.sum_squares(t).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let g = tape.sum(s).unwrap();
        let af = tape.scale(f, alpha).unwrap();
        let bg = tape.scale(g, beta).unwrap();
        let root = tape.add(af, bg).unwrap();
        tape.backward(root).unwrap().wrt(wv)
    };
    let (gf, gg, mix) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.5, -0.75));
    for i in 0..gf.len() {
        let want = 2.5 * gf.as_slice()[i] - 0.75 * gg.as_slice()[i];
        assert!((mix.as_slice()[i] - want).abs() < 1e-13);
    }
}

#[test]
fn backward_is_deterministic() {
    let w = random(5, 5, 3);
    let x = random(5, 2, 4);
    let (v1, g1) = tanh_wx(&w, &x);
    let (v2, g2) = tanh_wx(&w, &x);
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert!(g1.as_slice().iter().zip(g2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn unused_parameter_gets_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::filled(2, 2, 1.0)).unwrap();
    let b: Var = tape.param(Matrix::filled(1, 3, 1.0)).unwrap();
    let root = tape.sum_squares(a).unwrap();
    let g = tape.backward(root).unwrap();
    assert!(g.get(b).is_none());
    assert_eq!(g.wrt(b), Matrix::zeros(1, 3));
}

proptest! {
    #[test]
    fn sum_squares_gradient_is_twice_the_input(values in prop::collection::vec(-1e3..1e3f64, 1..20)) {
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.param(Matrix::from_vec(1, n, values.clone())).unwrap();
        let root = tape.sum_squares(x).unwrap();
        let g = tape.backward(root).unwrap().wrt(x);
        for (gi, vi) in g.as_slice().iter().zip(&values) {
            prop_assert_eq!(*gi, 2.0 * vi);
        }
    }

    #[test]
    fn matmul_gradient_matches_outer_products(r in 1usize..5, k in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        // d/dA sum(A B) = 1 B^T, d/dB sum(A B) = A^T 1.
        let a = random(r, k, seed);
        let b = random(k, c, seed ^ 1);
        let mut tape = Tape::new();
        let av = tape.param(a.clone()).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        let p = tape.matmul(av, bv).unwrap();
        let root = tape.sum(p).unwrap();
        let g = tape.backward(root).unwrap();
        let (ga, gb) = (g.wrt(av), g.wrt(bv));
        for i in 0..r {
            for j in 0..k {
                let want: f64 = (0..c).map(|q| b.get(j, q)).sum();
                prop_assert!((ga.get(i, j) - want).abs() < 1e-12);
            }
        }
        for j in 0..k {
            for q in 0..c {
                let want: f64 = (0..r).map(|i| a.get(i, j)).sum();
                prop_assert!((gb.get(j, q) - want).abs() < 1e-12);
            }
        }
    }
}
