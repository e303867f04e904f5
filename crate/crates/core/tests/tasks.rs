use jslds_core::matrix::Matrix;
use jslds_core::tasks::{
    gen_3bit, gen_context, generate, holdout_indices, r_squared, rounded_accuracy, split_holdout, ContextOptions, TaskKind,
    ThreeBitOptions, TrialMeta, CONTEXT_EVAL_MUS,
};
use proptest::prelude::*;

fn meta_states(meta: &TrialMeta) -> &[[i8; 3]] {
    match meta {
        TrialMeta::ThreeBit { states } => states,
        _ => panic!("not a 3-bit trial"),
    }
}

#[test]
fn targets_hold_the_last_pulse() {
    let batch = gen_3bit(5, 64, 12, ThreeBitOptions::default()).unwrap();
    for b in 0..64 {
        let states = meta_states(&batch.meta[b]);
        let mut memory = [0.0; 3];
        for (t, s) in states.iter().enumerate() {
            for c in 0..3 {
                if s[c] != 0 {
                    memory[c] = f64::from(s[c]);
                }
                assert_eq!(batch.target(b, t)[c], memory[c]);
            }
        }
    }
}

#[test]
fn silent_channels_read_zero() {
    // With a vanishing pulse rate nearly every channel stays silent; silent ones must target 0.
    let batch = gen_3bit(6, 32, 10, ThreeBitOptions { pulse_probability: Some(1e-9) }).unwrap();
    for b in 0..32 {
        for t in 0..10 {
            assert_eq!(batch.input(b, t), &[0.0; 6]);
            assert_eq!(batch.target(b, t), &[0.0; 3]);
        }
    }
}

#[test]
fn pulse_rate_within_three_sigma() {
    let p = 0.1;
    let (b, t) = (1000, 34);
    let batch = gen_3bit(7, b, t, ThreeBitOptions { pulse_probability: Some(p) }).unwrap();
    let n = (b * t * 3) as f64;
    let hits = batch.meta.iter().flat_map(|m| meta_states(m).iter().flatten()).filter(|&&s| s != 0).count() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((hits - n * p).abs() <= 3.0 * sigma, "{hits} vs {}", n * p);
}

#[test]
fn noiseless_integration_is_linear() {
    let opts = ContextOptions { eval_mus: Some(vec![0.02]), noise_std: 0.0, ..Default::default() };
    let batch = gen_context(1, 2, 25, &opts).unwrap();
    for b in 0..2 {
        for t in 0..25 {
            assert!((batch.target(b, t)[0] - 0.02 * (t + 1) as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn target_is_prefix_sum_of_the_cued_stream() {
    let batch = gen_context(2, 40, 25, &ContextOptions::default()).unwrap();
    for b in 0..40 {
        let TrialMeta::Context { context, .. } = batch.meta[b] else { panic!() };
        assert_eq!(batch.u_star.row(b)[2 + context], 1.0);
        let mut sum = 0.0;
        for t in 0..25 {
            let u = batch.input(b, t);
            assert_eq!((u[2], u[3]), if context == 0 { (1.0, 0.0) } else { (0.0, 1.0) });
            sum += u[context];
            assert!((batch.target(b, t)[0] - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn irrelevant_stream_does_not_move_the_target() {
    let mut batch = gen_context(3, 16, 25, &ContextOptions::default()).unwrap();
    let before = batch.targets.clone();
    for b in 0..16 {
        let TrialMeta::Context { context, .. } = batch.meta[b] else { panic!() };
        for t in 0..25 {
            batch.inputs[t].set(b, 1 - context, 123.0);
        }
    }
    // Regenerating targets from the perturbed inputs must reproduce the originals.
    for b in 0..16 {
        let TrialMeta::Context { context, .. } = batch.meta[b] else { panic!() };
        let mut sum = 0.0;
        for t in 0..25 {
            sum += batch.input(b, t)[context];
            assert!((before[t].get(b, 0) - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_grid_covers_every_condition() {
    let k = CONTEXT_EVAL_MUS.len();
    let batch = generate(TaskKind::Context, 4, 2 * k * k, 5, true).unwrap();
    let mut seen: Vec<(usize, [u64; 2])> = batch
        .meta
        .iter()
        .map(|m| match m {
            TrialMeta::Context { context, mu } => (*context, [mu[0].to_bits(), mu[1].to_bits()]),
            _ => panic!(),
        })
        .collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 2 * k * k);
}

#[test]
fn generators_are_deterministic() {
    for task in [TaskKind::ThreeBit, TaskKind::Context] {
        assert_eq!(generate(task, 9, 8, 10, false).unwrap(), generate(task, 9, 8, 10, false).unwrap());
        assert_ne!(generate(task, 9, 8, 10, false).unwrap(), generate(task, 10, 8, 10, false).unwrap());
    }
}

#[test]
fn trials_do_not_depend_on_batch_size() {
    let small = gen_3bit(12, 4, 10, ThreeBitOptions::default()).unwrap();
    let large = gen_3bit(12, 9, 10, ThreeBitOptions::default()).unwrap();
    assert_eq!(small, large.select(&[0, 1, 2, 3]));
}

#[test]
fn invalid_options_are_rejected() {
    assert!(gen_3bit(0, 0, 5, ThreeBitOptions::default()).is_err());
    assert!(gen_3bit(0, 4, 5, ThreeBitOptions { pulse_probability: Some(1.5) }).is_err());
    assert!(gen_context(0, 4, 5, &ContextOptions { noise_std: -1.0, ..Default::default() }).is_err());
    assert!(holdout_indices(10, 0.0, 0).is_err());
    assert!(holdout_indices(2, 0.1, 0).is_err());
}

#[test]
fn scores_on_hand_examples() {
    let y = vec![Matrix::row_vector(&[1.0, 0.0, -1.0])];
    assert_eq!(rounded_accuracy(&[Matrix::row_vector(&[0.6, 0.4, -0.9])], &y), 1.0);
    assert!((rounded_accuracy(&[Matrix::row_vector(&[0.4, 0.4, 0.0])], &y) - 1.0 / 3.0).abs() < 1e-15);
    // Targets 1,2,3 (mean 2, SS 2); residuals 0,0,1 -> R^2 = 1 - 1/2.
    let t = vec![Matrix::row_vector(&[1.0, 2.0, 3.0])];
    assert_eq!(r_squared(&t, &t), 1.0);
    assert!((r_squared(&[Matrix::row_vector(&[1.0, 2.0, 2.0])], &t) - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn holdout_split_partitions_the_batch(n in 2usize..300, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let Ok((train, hold)) = holdout_indices(n, fraction, seed) else { return Ok(()) };
        prop_assert_eq!(hold.len(), (fraction * n as f64).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&hold).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(holdout_indices(n, fraction, seed).unwrap(), (train, hold));
    }

    #[test]
    fn split_batches_keep_their_trials(seed in any::<u64>()) {
        let batch = gen_3bit(seed, 20, 6, ThreeBitOptions::default()).unwrap();
        let (train, hold) = split_holdout(&batch, 0.25, seed).unwrap();
        prop_assert_eq!(train.batch_size() + hold.batch_size(), 20);
        prop_assert_eq!(hold.batch_size(), 5);
    }
}
