use jslds_core::cells::{CellKind, ParamSet};
use jslds_core::matrix::Matrix;
use jslds_core::rng::from_seed;
use jslds_core::tasks::TaskKind;
use jslds_core::train::{
    loss_and_grads, mean_std, multi_seed, train_run, train_run_with, training_batch, initialize, metrics_csv, Checkpoint,
    OptimizerState, TrainConfig, TrainError,
};
use rand::Rng;

fn small(task: TaskKind, iterations: usize) -> TrainConfig {
    TrainConfig {
        task,
        state_dim: 8,
        batch_size: 16,
        timesteps: 10,
        iterations,
        holdout_trials: 32,
        ..TrainConfig::desk_three_bit()
    }
}

/// Two hand-iterated Adam steps on a scalar.
#[test]
fn adam_matches_hand_iteration() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let gs = [0.5, -2.0];
    let mut p = Matrix::from_vec(1, 1, vec![1.0]);
    let mut opt = OptimizerState::new(&[&p]);
    let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
    for (t, &g) in gs.iter().enumerate() {
        opt.adam_step(&mut [&mut p], &[Matrix::from_vec(1, 1, vec![g])], lr).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = (t + 1) as i32;
        want -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        assert!((p.get(0, 0) - want).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut p = Matrix::zeros(1, 2);
    let mut opt = OptimizerState::new(&[&p]);
    assert!(opt.adam_step(&mut [&mut p], &[Matrix::from_vec(1, 2, vec![f64::NAN, 0.0])], 0.1).is_err());
    assert!(opt.adam_step(&mut [&mut p], &[Matrix::zeros(2, 1)], 0.1).is_err());
    assert_eq!(opt.step, 0);
}

#[test]
fn l2_adds_exactly_its_penalty() {
    let config = small(TaskKind::Context, 0);
    let (theta, phi) = initialize(&config);
    let batch = training_batch(&config, 0).unwrap();
    let l2 = 1e-3;
    let (v0, g0) = loss_and_grads(&theta, &phi, &batch, &config.weights, 0.0).unwrap();
    let (v1, g1) = loss_and_grads(&theta, &phi, &batch, &config.weights, l2).unwrap();
    assert!((v1.total - v0.total - l2 * theta.sum_squares()).abs() < 1e-12);
    let n_theta = theta.tensors().len();
    for (i, (a, b)) in g0.iter().zip(&g1).enumerate() {
        for (k, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
            let extra = if i < n_theta { 2.0 * l2 * theta.tensors()[i].as_slice()[k] } else { 0.0 };
            assert!((y - x - extra).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_iterations_returns_the_initialization() {
    let config = small(TaskKind::ThreeBit, 0);
    let out = train_run(&config).unwrap();
    let (theta, phi) = initialize(&config);
    assert!(out.log.is_empty());
    assert_eq!((out.checkpoint.theta, out.checkpoint.phi, out.checkpoint.iteration), (theta, phi, 0));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let config = small(TaskKind::ThreeBit, 15);
    let a = train_run(&config).unwrap();
    let b = train_run(&config).unwrap();
    assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
    assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
    let c = train_run(&TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(metrics_csv(&a.log), metrics_csv(&c.log));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let config = TrainConfig { checkpoint_every: 6, ..small(TaskKind::Context, 12) };
    let full = train_run(&config).unwrap();
    let mut saved: Vec<Checkpoint> = Vec::new();
    train_run_with(&config, None, &mut |ck| saved.push(ck.clone())).unwrap();
    assert_eq!(saved.iter().map(|c| c.iteration).collect::<Vec<_>>(), [6, 12]);
    let mid = Checkpoint::from_json(&saved[0].to_json()).unwrap();
    let resumed = train_run_with(&config, Some(mid), &mut |_| {}).unwrap();
    assert_eq!(resumed.checkpoint.to_json(), full.checkpoint.to_json());
    assert_eq!(metrics_csv(&resumed.log), metrics_csv(&full.log[6..]));
}

#[test]
fn short_run_reduces_the_loss() {
    let config = TrainConfig { state_dim: 16, batch_size: 32, iterations: 200, ..small(TaskKind::ThreeBit, 0) };
    let out = train_run(&config).unwrap();
    let window = |rows: &[jslds_core::train::MetricRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    let (first, last) = (window(&out.log[..50]), window(&out.log[150..]));
    assert!(last < first, "{first} -> {last}");
    assert!(out.log.iter().all(|r| r.wallclock_ms == 0));
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let config = TrainConfig { learning_rate: 1e300, lr_floor: 1e300, clip_norm: 0.0, ..small(TaskKind::ThreeBit, 20) };
    match train_run(&config) {
        Err(TrainError::Diverged { iteration, last_good, .. }) => {
            assert_eq!(last_good.iteration, iteration);
            assert!(last_good.theta.tensors().iter().all(|m| m.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.checkpoint.iteration)),
    }
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let bad = TrainConfig { state_dim: 0, learning_rate: -1.0, ..small(TaskKind::ThreeBit, 1) };
    match train_run(&bad) {
        Err(TrainError::Config(problems)) => assert!(problems.len() >= 2, "{problems:?}"),
        _ => panic!("expected a config error"),
    }
}

#[test]
fn multi_seed_aggregates_are_population_statistics() {
    let config = TrainConfig { cell: CellKind::Vanilla, ..small(TaskKind::Context, 5) };
    let (report, outcomes) = multi_seed(&config, &[3, 4, 5]).unwrap();
    assert_eq!(outcomes.len(), 3);
    for agg in &report.aggregates {
        let vals: Vec<f64> = report
            .runs
            .iter()
            .map(|r| jslds_core::train::scalar_metrics(&r.eval).into_iter().find(|(n, _)| *n == agg.name).unwrap().1)
            .collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((agg.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((agg.std - std).abs() <= 1e-12 * std.max(1.0));
    }
    let single = train_run(&TrainConfig { seed: 4, ..config.clone() }).unwrap();
    assert_eq!(outcomes[1].checkpoint.to_json(), single.checkpoint.to_json());
}

#[test]
fn duplicate_seeds_give_zero_spread() {
    let config = small(TaskKind::ThreeBit, 4);
    let (report, _) = multi_seed(&config, &[7, 7]).unwrap();
    assert!(report.aggregates.iter().all(|a| a.std == 0.0));
    assert_eq!(report.runs[0].eval, report.runs[1].eval);
}

#[test]
fn mean_std_matches_direct_formulas() {
    let mut rng = from_seed(2);
    let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
    let (m, s) = mean_std(&xs);
    let m2 = xs.iter().sum::<f64>() / 100.0;
    let s2 = (xs.iter().map(|x| x * x).sum::<f64>() / 100.0 - m2 * m2).sqrt();
    assert!((m - m2).abs() < 1e-14 && (s - s2).abs() < 1e-10);
    assert!(mean_std(&[]).0.is_nan());
}

#[test]
fn presets_are_valid_and_hash_distinctly() {
    let mut hashes: Vec<String> = TrainConfig::PRESETS.iter().map(|n| TrainConfig::preset(n).unwrap()).map(|c| {
        assert!(c.problems().is_empty());
        c.hash()
    }).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), TrainConfig::PRESETS.len());
    let full = TrainConfig::full_three_bit();
    assert_eq!((full.state_dim, full.batch_size, full.iterations), (100, 256, 20_000));
    let full = TrainConfig::full_context();
    assert_eq!((full.state_dim, full.batch_size, full.cell), (128, 256, CellKind::Vanilla));
}
