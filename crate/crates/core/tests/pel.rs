//! Penalized EL fits and the SCAD penalty.

use nalgebra::{DMatrix, DVector};
use pepsi::el::{dual_residual, el_weights};
use pepsi::model_spec::Observation;
use pepsi::pel::default_tau_grid;
use pepsi::{
    bic_select, eval_score, pel_fit, scad, Family, ModelSpec, PenaltyConfig, SecondaryDataset,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset(seed: u64, family: Family, n: usize, p: usize) -> SecondaryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Roughly half the slopes are exactly zero.
    let theta: Vec<f64> = (0..p)
        .map(|k| {
            if k % 2 == 1 {
                0.0
            } else {
                rng.random_range(0.5..1.5)
            }
        })
        .collect();
    let y = DVector::from_fn(n, |i, _| {
        let eta: f64 = 0.3 + (0..p).map(|k| theta[k] * x[(i, k)]).sum::<f64>();
        match family {
            Family::Linear => eta + rng.sample::<f64, _>(StandardNormal),
            Family::Logistic => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())),
        }
    });
    SecondaryDataset::new(1, y, x).unwrap()
}

fn scores(spec: &ModelSpec, theta: &DVector<f64>, s: &SecondaryDataset) -> DMatrix<f64> {
    let x = s.x();
    let rows: Vec<DVector<f64>> = (0..s.n())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            eval_score(
                spec,
                theta,
                Observation {
                    y: s.y()[i],
                    x: &row,
                },
            )
            .unwrap()
        })
        .collect();
    DMatrix::from_fn(s.n(), spec.dim_g(), |i, k| rows[i][k])
}

fn check_fit(fit: &pepsi::SecondaryFit, s: &SecondaryDataset, cfg: &PenaltyConfig) {
    // Magnitudes are either exactly zero or above the threshold.
    for (j, &v) in fit.theta_hat.iter().enumerate() {
        let zeroed = fit.zero_index_set.contains(&j);
        assert_eq!(v == 0.0, zeroed, "coefficient {j} = {v}");
        assert!(v == 0.0 || v.abs() > cfg.gamma);
    }
    assert_eq!(fit.q_hat, fit.zero_index_set.len());

    // Accepted steps never increase the penalized objective.
    let path = &fit.objective_path;
    for k in 1..path.len() {
        if !fit.threshold_steps.contains(&k) {
            assert!(
                path[k] <= path[k - 1] + 1e-12 * (1.0 + path[k - 1].abs()),
                "step {k}: {} -> {}",
                path[k - 1],
                path[k]
            );
        }
    }

    // The reported multiplier solves the dual at the final estimate.
    let g = scores(&fit.spec, &fit.theta_hat, s);
    assert!(dual_residual(&fit.lambda_hat, &g).norm() <= 1e-8);
    let w = el_weights(&fit.lambda_hat, &g);
    assert!(w.iter().all(|&v| v > 0.0));
    assert!((w.sum() - 1.0).abs() <= 1e-10);
    assert!(g.tr_mul(&w).amax() <= 1e-8);
    assert!(
        fit.log_ratio >= 0.0,
        "log ratio {:e}, lambda {}",
        fit.log_ratio,
        fit.lambda_hat.amax()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fits_satisfy_their_invariants(
        seed in any::<u64>(),
        logistic in any::<bool>(),
        intercept in any::<bool>(),
        n in 80usize..300,
        p in 2usize..=4,
        tau_pos in 0usize..20,
    ) {
        let family = if logistic { Family::Logistic } else { Family::Linear };
        let s = dataset(seed, family, n, p);
        let spec = ModelSpec::new(family, p).with_intercept(intercept);
        let cfg = PenaltyConfig::default();
        let tau = default_tau_grid(&s, &spec, &cfg)[tau_pos];
        if let Ok(fit) = pel_fit(&s, &spec, tau, &cfg) {
            check_fit(&fit, &s, &cfg);
            prop_assert_eq!(fit.tau_selected, tau);
        }
    }

    #[test]
    fn selected_fit_satisfies_the_invariants(seed in any::<u64>(), n in 100usize..300) {
        let s = dataset(seed, Family::Linear, n, 4);
        let spec = ModelSpec::new(Family::Linear, 4).without_intercept();
        let cfg = PenaltyConfig::default();
        let fit = bic_select(&s, &spec, &cfg).unwrap();
        check_fit(&fit, &s, &cfg);
        let again = bic_select(&s, &spec, &cfg).unwrap();
        prop_assert_eq!(again.theta_hat, fit.theta_hat);
        prop_assert_eq!(again.bic_value, fit.bic_value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn scad_shape(t in 0.0f64..10.0, dt in 0.0f64..1.0, tau in 0.01f64..2.0, a in 2.01f64..6.0) {
        let (v, d) = scad(t, tau, a).unwrap();
        let (v2, d2) = scad(t + dt, tau, a).unwrap();
        // Non-negative, non-decreasing, concave in |t|.
        prop_assert!(v >= 0.0 && d >= 0.0);
        prop_assert!(v2 >= v - 1e-15 * (1.0 + v));
        prop_assert!(d2 <= d + 1e-15);
        prop_assert!(d <= tau + 1e-15);
        if t <= tau {
            prop_assert!((v - tau * t).abs() <= 1e-12 * (1.0 + v));
        }
        if t >= a * tau {
            prop_assert_eq!(d, 0.0);
            prop_assert!((v - (a + 1.0) * tau * tau / 2.0).abs() <= 1e-12 * (1.0 + v));
        }
        // Mean-value bound: the increment matches the derivative range.
        prop_assert!(v2 - v <= d * dt + 1e-12 * (1.0 + v2));
        prop_assert!(v2 - v >= d2 * dt - 1e-12 * (1.0 + v2));
    }
}

#[test]
fn invalid_penalty_settings_are_rejected() {
    assert!(scad(1.0, 1.0, 2.0).is_err());
    assert!(scad(1.0, 0.0, 3.7).is_err());
    for cfg in [
        PenaltyConfig {
            a: 1.5,
            ..Default::default()
        },
        PenaltyConfig {
            gamma: 0.0,
            ..Default::default()
        },
        PenaltyConfig {
            tau_grid: Some(vec![]),
            ..Default::default()
        },
        PenaltyConfig {
            tau_grid: Some(vec![0.1, -0.2]),
            ..Default::default()
        },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let s = dataset(3, Family::Linear, 60, 2);
    let spec = ModelSpec::new(Family::Linear, 2);
    assert!(pel_fit(&s, &spec, 0.0, &PenaltyConfig::default()).is_err());
}

#[test]
fn sparsity_path_is_mostly_monotone_in_tau() {
    // A soft diagnostic: the number of zeros along a fine grid may wiggle,
    // but large reversals would indicate a broken path.
    let cfg = PenaltyConfig::default();
    let spec = ModelSpec::new(Family::Linear, 4).without_intercept();
    let mut reversals = 0;
    let mut steps = 0;
    for seed in 0..10 {
        let s = dataset(100 + seed, Family::Linear, 300, 4);
        let grid = default_tau_grid(&s, &spec, &cfg);
        let zeros: Vec<usize> = grid
            .iter()
            .filter_map(|&t| pel_fit(&s, &spec, t, &cfg).ok().map(|f| f.q_hat))
            .collect();
        for w in zeros.windows(2) {
            steps += 1;
            if w[1] < w[0] {
                reversals += 1;
            }
        }
    }
    eprintln!("sparsity reversals: {reversals} of {steps} grid steps");
    assert!(reversals * 10 <= steps, "{reversals} of {steps}");
}
