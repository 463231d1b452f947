//! Score Jacobians against finite differences, and model-spec properties.

use nalgebra::{DMatrix, DVector};
use pepsi::model_spec::Observation;
use pepsi::{
    apply_zero_constraints, eval_jacobian, eval_score, solve_weighted_ee, Family, Method,
    ModelSpec, PrimaryDataset, WeightVector,
};
use proptest::prelude::*;

mod common;
use common::{central_difference, mean_score};

#[derive(Debug, Clone)]
struct Case {
    family: Family,
    intercept: bool,
    zeros: Vec<usize>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    params: DVector<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (
        prop_oneof![Just(Family::Linear), Just(Family::Logistic)],
        any::<bool>(),
        1usize..=4,
        10usize..60,
    )
        .prop_flat_map(|(family, intercept, p, n)| {
            let dim_g = p + usize::from(intercept);
            (
                Just(family),
                Just(intercept),
                proptest::collection::vec(-2.0f64..2.0, n * p),
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(-1.0f64..1.0, dim_g),
                proptest::sample::subsequence((0..dim_g).collect::<Vec<_>>(), 0..dim_g),
                Just((n, p)),
            )
        })
        .prop_map(|(family, intercept, xv, yv, full, zeros, (n, p))| {
            let x = DMatrix::from_vec(n, p, xv);
            let y = DVector::from_fn(n, |i, _| match family {
                Family::Linear => yv[i],
                Family::Logistic => f64::from(yv[i] > 0.0),
            });
            let free: Vec<f64> = (0..full.len())
                .filter(|j| !zeros.contains(j))
                .map(|j| full[j])
                .collect();
            Case {
                family,
                intercept,
                zeros,
                x,
                y,
                params: DVector::from_vec(free),
            }
        })
}

fn spec_of(c: &Case) -> ModelSpec {
    let base = ModelSpec::new(c.family, c.x.ncols()).with_intercept(c.intercept);
    apply_zero_constraints(&base, &c.zeros).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn jacobian_matches_central_differences(c in case()) {
        let spec = spec_of(&c);
        let analytic = eval_jacobian(&spec, &c.params, &c.y, &c.x).unwrap();
        let numeric = central_difference(&spec, &c.params, &c.y, &c.x, 1e-6);
        prop_assert_eq!(analytic.shape(), (spec.dim_g(), spec.dim_theta()));
        let err = (&analytic - &numeric).amax();
        prop_assert!(
            err <= 1e-6 * analytic.amax().max(1e-3),
            "relative error {} ({:?})", err / analytic.amax(), c.family
        );
    }

    #[test]
    fn constrained_score_equals_manual_zeros(c in case()) {
        let spec = spec_of(&c);
        let unconstrained = ModelSpec::new(c.family, c.x.ncols()).with_intercept(c.intercept);
        let full = spec.expand(&c.params).unwrap();
        for &j in &c.zeros {
            prop_assert_eq!(full[j], 0.0);
        }
        for i in 0..c.y.len() {
            let row: Vec<f64> = c.x.row(i).iter().copied().collect();
            let obs = || Observation { y: c.y[i], x: &row };
            let a = eval_score(&spec, &c.params, obs()).unwrap();
            let b = eval_score(&unconstrained, &full, obs()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear_score_root_is_least_squares(
        (n, p) in (8usize..50, 1usize..=4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let primary = PrimaryDataset::new(y.clone(), x.clone()).unwrap();
        let spec = ModelSpec::new(Family::Linear, p);
        let w = WeightVector::uniform(n, Method::Naive);
        let beta = solve_weighted_ee(&spec, &primary, &w, None).unwrap();
        let z = DMatrix::from_fn(n, p + 1, |i, k| if k == 0 { 1.0 } else { x[(i, k - 1)] });
        let ls = z.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        let tol = 1e-8 * (1.0 + ls.amax());
        prop_assert!((&beta - &ls).amax() <= tol, "{} vs {}", beta, ls);
        let score = mean_score(&spec, &beta, &y, &x);
        prop_assert!(score.amax() <= 1e-10 * (1.0 + y.amax()));
    }
}

#[test]
fn logistic_jacobian_in_the_tails() {
    // Large linear predictors exercise the stable expit branch; differences
    // are below roundoff here, so compare with the closed form instead.
    let t = [-40.0, -25.0, 25.0, 40.0];
    let x = DMatrix::from_column_slice(4, 1, &t);
    let y = DVector::from_column_slice(&[0.0, 1.0, 0.0, 1.0]);
    let spec = ModelSpec::new(Family::Logistic, 1).without_intercept();
    let params = DVector::from_column_slice(&[1.0]);
    let analytic = eval_jacobian(&spec, &params, &y, &x).unwrap();
    let expected: f64 = t
        .iter()
        .map(|&v| {
            let p = 1.0 / (1.0 + (-v).exp());
            -p * (1.0 - p) * v * v
        })
        .sum::<f64>()
        / 4.0;
    assert!(analytic[(0, 0)].is_finite());
    assert!((analytic[(0, 0)] - expected).abs() <= 1e-6 * expected.abs());
}
