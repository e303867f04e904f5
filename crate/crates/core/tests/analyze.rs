use jslds_core::analyze::{
    build_choice_subspace, find_fixed_points, pca_project, project, relative_error_jslds, relative_error_jslds_one_step,
    relative_error_standard, selection_analysis, speed, FixedPointOptions, LinearizationReport,
};
use jslds_core::cells::{Affine, CellKind, CellParams, CellWeights};
use jslds_core::jslds::{co_rollout, ExpansionParams};
use jslds_core::linalg::{eig, eig_lr, RESIDUAL_TOL};
use jslds_core::matrix::Matrix;
use jslds_core::rng::from_seed;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn vanilla(w: Matrix, v: Matrix, b: Matrix) -> CellParams {
    let (d, u) = (w.rows(), v.cols());
    let mut theta = CellParams::zeros(CellKind::Vanilla, d, u, 1);
    theta.weights = CellWeights::Vanilla(Affine { w, v, b });
    theta
}

fn scalar_cell(w: f64) -> CellParams {
    vanilla(Matrix::filled(1, 1, w), Matrix::zeros(1, 1), Matrix::zeros(1, 1))
}

/// Root of `h - tanh(2h)` on `[lo, hi]` by bisection.
fn bisect(mut lo: f64, mut hi: f64) -> f64 {
    let g = |h: f64| h - (2.0 * h).tanh();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(lo) * g(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn contracting_map_has_only_the_origin() {
    let theta = scalar_cell(0.0);
    let cands: Vec<Vec<f64>> = [-2.0, -0.3, 0.7, 3.0].iter().map(|&x| vec![x]).collect();
    let us = vec![vec![0.0]; 4];
    let set = find_fixed_points(&theta, &us, &cands, &FixedPointOptions::default()).unwrap();
    assert_eq!(set.len(), 1);
    assert!(set.points[0][0].abs() < 1e-6);
}

#[test]
fn planted_bistable_fixed_points() {
    let root = bisect(0.5, 1.5);
    assert!((root - 0.957504).abs() < 1e-6);
    let theta = scalar_cell(2.0);
    let cands: Vec<Vec<f64>> = [-2.0, -0.1, 0.1, 2.0].iter().map(|&x| vec![x]).collect();
    let us = vec![vec![0.0]; 4];
    let set = find_fixed_points(&theta, &us, &cands, &FixedPointOptions::default()).unwrap();
    let mut found: Vec<f64> = set.points.iter().map(|p| p[0]).collect();
    found.sort_by(f64::total_cmp);
    assert_eq!(found.len(), 3, "{found:?}");
    for (f, want) in found.iter().zip([-root, 0.0, root]) {
        assert!((f - want).abs() < 1e-6, "{f} vs {want}");
    }
    assert!(set.is_fixed().iter().all(|&x| x));
}

#[test]
fn exact_fixed_point_is_returned_unchanged() {
    let mut rng = from_seed(40);
    let b = uniform(1, 5, 1.0, &mut rng);
    let p: Vec<f64> = b.row(0).iter().map(|x| x.tanh()).collect();
    let theta = vanilla(Matrix::zeros(5, 5), uniform(5, 2, 1.0, &mut rng), b);
    assert_eq!(speed(&theta, &p, &[0.0, 0.0]).unwrap(), 0.0);
    let set = find_fixed_points(&theta, &[vec![0.0, 0.0]], &[p.clone()], &FixedPointOptions::default()).unwrap();
    assert_eq!(set.points, vec![p]);
    assert_eq!(set.speeds, vec![0.0]);
}

#[test]
fn slow_points_kept_only_under_tolerance() {
    let theta = scalar_cell(2.0);
    let opts = FixedPointOptions { max_iters: 0, newton_steps: 0, ..Default::default() };
    // No optimization: 2.0 has speed (2 - tanh 4)^2 ~ 1, far above the tolerance.
    let set = find_fixed_points(&theta, &[vec![0.0], vec![0.0]], &[vec![2.0], vec![0.0]], &opts).unwrap();
    assert_eq!((set.candidates, set.survivors, set.len()), (2, 1, 1));
    assert_eq!(set.candidate_cluster, vec![None, Some(0)]);
}

fn det(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    d
}

fn residual(a: &Matrix, lambda: Complex64, v: &[Complex64]) -> f64 {
    (0..a.rows())
        .map(|i| {
            let av: Complex64 = (0..a.cols()).map(|j| v[j] * a.get(i, j)).sum();
            (av - lambda * v[i]).norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

#[test]
fn random_spectra_satisfy_trace_det_and_residuals() {
    let mut rng = from_seed(41);
    for _ in 0..50 {
        let a = uniform(6, 6, 1.0, &mut rng);
        let norm = a.sum_squares().sqrt();
        let e = eig_lr(&a).unwrap();
        let sum: Complex64 = e.values.iter().sum();
        let prod: Complex64 = e.values.iter().product();
        let trace: f64 = (0..6).map(|i| a.get(i, i)).sum();
        assert!((sum - trace).norm() <= 1e-8 && sum.im.abs() <= 1e-8);
        assert!((prod - det(&a)).norm() <= 1e-8);
        let at = a.transpose();
        for k in 0..6 {
            assert!(residual(&a, e.values[k], &e.right[k]) <= RESIDUAL_TOL * norm);
            assert!(residual(&at, e.values[k], &e.left[k]) <= RESIDUAL_TOL * norm);
        }
        assert!(e.values.windows(2).all(|w| w[0].norm() >= w[1].norm() - 1e-12));
    }
}

#[test]
fn rotation_spectra_are_exact() {
    for theta in [0.1, 0.7, 1.3, 2.9] {
        let (c, s) = (f64::cos(theta), f64::sin(theta));
        let r = Matrix::from_vec(2, 2, vec![c, -s, s, c]);
        let mut vals = eig(&r).unwrap().values;
        vals.sort_by(|a, b| a.im.total_cmp(&b.im));
        assert!((vals[0] - Complex64::new(c, -s)).norm() <= 1e-10);
        assert!((vals[1] - Complex64::new(c, s)).norm() <= 1e-10);
    }
    let id = eig(&Matrix::identity(5)).unwrap();
    assert!(id.values.iter().all(|z| (*z - 1.0).norm() <= 1e-12));
}

#[test]
fn linearization_counts_marginal_modes() {
    let w = Matrix::from_fn(3, 3, |i, j| if i == j { [1.0, 0.97, 0.5][i] } else { 0.0 });
    let theta = vanilla(w, Matrix::zeros(3, 1), Matrix::zeros(1, 3));
    let rep = LinearizationReport::new(&theta, &[0.0; 3], &[0.0]).unwrap();
    assert_eq!(rep.count_near_one(0.05), 2);
    assert_eq!(rep.count_near_one(0.025), 1);
    assert!((rep.modulus(2).unwrap() - 0.5).abs() < 1e-12);
    assert!(rep.modulus(3).is_none());
}

/// Standard-protocol relative error rebuilt by hand with `diag(1 - F^2) W` Jacobians.
#[test]
fn standard_error_matches_independent_oracle() {
    let mut rng = from_seed(42);
    let (d, u, b, t_len) = (4, 2, 3, 6);
    let theta = vanilla(uniform(d, d, 0.8, &mut rng), uniform(d, u, 1.0, &mut rng), uniform(1, d, 0.3, &mut rng));
    let us = vec![vec![0.1, -0.2]; b];
    let cands: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let fps = find_fixed_points(&theta, &us, &cands, &FixedPointOptions { tol: 1.0, ..Default::default() }).unwrap();
    assert!(!fps.is_empty());
    let inputs: Vec<Matrix> = (0..t_len).map(|_| uniform(b, u, 1.0, &mut rng)).collect();
    let u_star = Matrix::from_rows(&us);
    let got = relative_error_standard(&theta, &fps, &inputs, &u_star).unwrap();

    let CellWeights::Vanilla(p) = &theta.weights else { unreachable!() };
    let f = |h: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (p.b.get(0, i) + (0..d).map(|j| p.w.get(i, j) * h[j]).sum::<f64>() + (0..u).map(|j| p.v.get(i, j) * x[j]).sum::<f64>()).tanh()).collect()
    };
    let mut total = 0.0;
    for k in 0..b {
        let mut h = vec![0.0; d];
        for t in 0..t_len {
            let x = inputs[t].row(k);
            let next = f(&h, x);
            let idx = (0..fps.len())
                .min_by(|&i, &j| {
                    let di: f64 = fps.points[i].iter().zip(&h).map(|(a, c)| (a - c).powi(2)).sum();
                    let dj: f64 = fps.points[j].iter().zip(&h).map(|(a, c)| (a - c).powi(2)).sum();
                    di.total_cmp(&dj)
                })
                .unwrap();
            let fp = &fps.points[idx];
            let slope: Vec<f64> = f(fp, &us[k]).iter().map(|y| 1.0 - y * y).collect();
            let lin: Vec<f64> = (0..d)
                .map(|i| {
                    let rec: f64 = (0..d).map(|j| p.w.get(i, j) * (h[j] - fp[j])).sum();
                    let inp: f64 = (0..u).map(|j| p.v.get(i, j) * (x[j] - us[k][j])).sum();
                    fp[i] + slope[i] * (rec + inp)
                })
                .collect();
            let num: f64 = next.iter().zip(&lin).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let den: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
            total += num / den;
            h = next;
        }
    }
    assert!((got.mean - total / (b * t_len) as f64).abs() < 1e-12);
    assert_eq!(got.skipped, 0);
}

#[test]
fn small_signals_are_nearly_linear() {
    let mut rng = from_seed(43);
    let theta = vanilla(uniform(5, 5, 0.5, &mut rng), uniform(5, 2, 1.0, &mut rng), Matrix::zeros(1, 5));
    let fps = find_fixed_points(&theta, &[vec![0.0, 0.0]], &[vec![0.0; 5]], &FixedPointOptions::default()).unwrap();
    let inputs: Vec<Matrix> = (0..8).map(|_| uniform(4, 2, 1e-4, &mut rng)).collect();
    let err = relative_error_standard(&theta, &fps, &inputs, &Matrix::zeros(4, 2)).unwrap();
    assert!(err.mean <= 1e-4, "{}", err.mean);
}

#[test]
fn jslds_error_is_distance_between_streams() {
    let mut rng = from_seed(44);
    let theta = vanilla(uniform(3, 3, 0.8, &mut rng), uniform(3, 2, 1.0, &mut rng), uniform(1, 3, 0.3, &mut rng));
    let phi = ExpansionParams::init(3, &mut rng);
    let inputs: Vec<Matrix> = (0..5).map(|_| uniform(2, 2, 1.0, &mut rng)).collect();
    let u_star = uniform(2, 2, 0.2, &mut rng);
    let got = relative_error_jslds(&theta, &phi, &inputs, &u_star).unwrap();
    let traj = co_rollout(&theta, &phi, &inputs, &u_star).unwrap();
    for (k, tr) in traj.iter().enumerate() {
        let want: f64 = tr
            .h
            .iter()
            .zip(&tr.a)
            .map(|(h, a)| h.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / h.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / 5.0;
        assert!((got.per_trial[k] - want).abs() < 1e-12);
    }
}

/// Expansion net pinned at the origin, no recurrence, inputs equal to `u*`:
/// the JSLDS stays at zero while the RNN sits at `tanh(b)`.
#[test]
fn frozen_jslds_has_unit_error() {
    let mut rng = from_seed(45);
    let theta = vanilla(Matrix::zeros(3, 3), uniform(3, 2, 1.0, &mut rng), uniform(1, 3, 1.0, &mut rng));
    let phi = ExpansionParams::zeros(3);
    let u_star = uniform(2, 2, 1.0, &mut rng);
    let inputs = vec![u_star.clone(); 4];
    let err = relative_error_jslds(&theta, &phi, &inputs, &u_star).unwrap();
    assert!((err.mean - 1.0).abs() < 1e-15);
}

/// When the expansion net outputs an exact fixed point, the one-step JSLDS and
/// the standard protocol linearize around the same point.
#[test]
fn one_step_jslds_reduces_to_standard_at_a_fixed_point() {
    let mut rng = from_seed(46);
    let d = 4;
    let b = uniform(1, d, 1.0, &mut rng);
    let p: Vec<f64> = b.row(0).iter().map(|x| x.tanh()).collect();
    let theta = vanilla(Matrix::zeros(d, d), uniform(d, 2, 1.0, &mut rng), b.clone());
    let phi = ExpansionParams { w1: uniform(d, d, 1.0, &mut rng), b1: uniform(1, d, 1.0, &mut rng), w2: Matrix::zeros(d, d), b2: b };
    let fps = find_fixed_points(&theta, &[vec![0.0, 0.0]], &[p], &FixedPointOptions::default()).unwrap();
    let inputs: Vec<Matrix> = (0..6).map(|_| uniform(3, 2, 1.0, &mut rng)).collect();
    let u_star = Matrix::zeros(3, 2);
    let a = relative_error_jslds_one_step(&theta, &phi, &inputs, &u_star).unwrap();
    let s = relative_error_standard(&theta, &fps, &inputs, &u_star).unwrap();
    for (x, y) in a.per_trial.iter().zip(&s.per_trial) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn diag_report(w_diag: [f64; 2], v: Matrix) -> LinearizationReport {
    let w = Matrix::from_fn(2, 2, |i, j| if i == j { w_diag[i] } else { 0.0 });
    let theta = vanilla(w, v, Matrix::zeros(1, 2));
    LinearizationReport::new(&theta, &[0.0, 0.0], &[0.0, 0.0]).unwrap()
}

#[test]
fn selection_with_no_input_coupling_is_zero() {
    let rep = diag_report([0.9, 0.5], Matrix::zeros(2, 2));
    let sel = selection_analysis(&rep, &Matrix::identity(2), 2).unwrap();
    assert!(sel.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn selection_picks_the_aligned_input() {
    // Input 0 drives only the fast mode, input 1 only the slow one.
    let rep = diag_report([0.9, 0.5], Matrix::from_vec(2, 2, vec![0.0, 2.0, 1.0, 0.0]));
    let sel = selection_analysis(&rep, &Matrix::identity(2), 2).unwrap();
    for (got, want) in sel.as_slice().iter().zip([0.0, 1.0, 0.5, 0.0]) {
        assert!((got - want).abs() < 1e-12, "{sel:?}");
    }
    assert!(selection_analysis(&rep, &Matrix::identity(2), 3).is_err());
}

#[test]
fn selection_matches_direct_products() {
    let mut rng = from_seed(47);
    let theta = vanilla(uniform(5, 5, 0.8, &mut rng), uniform(5, 3, 1.0, &mut rng), uniform(1, 5, 0.3, &mut rng));
    let us = [0.1, 0.0, -0.2];
    let rep = LinearizationReport::new(&theta, &[0.1, -0.2, 0.3, 0.0, 0.2], &us).unwrap();
    let probes = uniform(3, 4, 1.0, &mut rng);
    let sel = selection_analysis(&rep, &probes, 3).unwrap();
    let raw = Matrix::from_fn(3, 4, |i, k| {
        let du: Vec<f64> = (0..3).map(|j| probes.get(j, k) - us[j]).collect();
        (0..5).map(|r| rep.left[i][r].re * (0..3).map(|j| rep.j_inp.get(r, j) * du[j]).sum::<f64>()).sum()
    });
    let scale = raw.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for (a, b) in sel.as_slice().iter().zip(raw.as_slice()) {
        assert!((a - b / scale).abs() < 1e-12);
    }
}

#[test]
fn choice_subspace_is_orthonormal_and_least_squares() {
    let mut rng = from_seed(48);
    let theta = vanilla(uniform(6, 6, 0.8, &mut rng), uniform(6, 2, 1.0, &mut rng), Matrix::zeros(1, 6));
    let reps: Vec<LinearizationReport> = (0..3)
        .map(|_| {
            let p: Vec<f64> = (0..6).map(|_| rng.random_range(-0.1..0.1)).collect();
            LinearizationReport::new(&theta, &p, &[0.0, 0.0]).unwrap()
        })
        .collect();
    let axes = vec![uniform(1, 6, 1.0, &mut rng).row(0).to_vec(), uniform(1, 6, 1.0, &mut rng).row(0).to_vec()];
    let basis = build_choice_subspace(&reps, &axes).unwrap();
    assert_eq!(basis.shape(), (3, 6));
    let gram = Matrix::product(&basis, false, &basis, true);
    for i in 0..3 {
        for j in 0..3 {
            assert!((gram.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
    let states = uniform(10, 6, 1.0, &mut rng);
    let coords = project(&states, &basis);
    // The residual of the least-squares fit is orthogonal to every axis.
    for r in 0..10 {
        let fit: Vec<f64> = (0..6).map(|c| (0..3).map(|k| coords.get(r, k) * basis.get(k, c)).sum()).collect();
        for k in 0..3 {
            let dot: f64 = (0..6).map(|c| (states.get(r, c) - fit[c]) * basis.get(k, c)).sum();
            assert!(dot.abs() < 1e-12);
        }
    }
    assert!(build_choice_subspace(&reps, &[axes[0].clone(), axes[0].clone()]).is_err());
    assert!(build_choice_subspace(&[], &axes).is_err());
}

#[test]
fn pca_matches_brute_force_on_a_small_cloud() {
    let x = Matrix::from_vec(4, 3, vec![2.0, 0.0, 1.0, -1.0, 1.0, 0.0, 0.0, -2.0, 1.0, 3.0, 1.0, -2.0]);
    let pca = pca_project(&x, 2).unwrap();
    let mean = [1.0, 0.0, 0.0];
    assert_eq!(pca.mean, mean);
    let var_along = |v: &[f64]| -> f64 {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (0..4).map(|r| ((0..3).map(|c| (x.get(r, c) - mean[c]) * v[c]).sum::<f64>() / n).powi(2)).sum::<f64>() / 3.0
    };
    assert!((var_along(pca.components.row(0)) - pca.explained_variance[0]).abs() < 1e-12);
    // No direction on a fine sphere grid beats the first component.
    for i in 0..60 {
        for j in 0..120 {
            let (th, ph) = (std::f64::consts::PI * i as f64 / 60.0, std::f64::consts::PI * j as f64 / 60.0);
            let v = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            assert!(var_along(&v) <= pca.explained_variance[0] + 1e-12);
        }
    }
    let total: f64 = (0..3).map(|c| var_along(&[(c == 0) as u8 as f64, (c == 1) as u8 as f64, (c == 2) as u8 as f64])).sum();
    assert!((pca.explained_ratio[0] - pca.explained_variance[0] / total).abs() < 1e-12);
    for r in 0..4 {
        for k in 0..2 {
            let want: f64 = (0..3).map(|c| (x.get(r, c) - mean[c]) * pca.components.get(k, c)).sum();
            assert!((pca.coords.get(r, k) - want).abs() < 1e-12);
        }
    }
    assert!(pca_project(&x, 4).is_err());
}
