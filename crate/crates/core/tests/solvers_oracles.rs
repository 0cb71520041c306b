use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tnd_tmle::solvers::{
    expit, fit_lasso_logistic, fit_logistic, kkt_max_violation, logit, IrlsOptions, LassoOptions,
};

/// Intercept plus `p` standard normal columns; the first three carry signal.
fn sparse_problem(n: usize, p: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = [1.0, -1.0, 0.8];
    let x = DMatrix::from_fn(n, p + 1, |_, j| {
        if j == 0 {
            1.0
        } else {
            StandardNormal.sample(&mut rng)
        }
    });
    let y = (0..n)
        .map(|i| {
            let eta: f64 = -0.3 + (0..3).map(|k| truth[k] * x[(i, k + 1)]).sum::<f64>();
            f64::from(u8::from(rng.random::<f64>() < expit(eta)))
        })
        .collect();
    (y, x)
}

#[test]
fn lasso_recovers_sparse_support() {
    let reps = 100;
    let (n, p) = (500, 20);
    let mut mask = vec![true; p + 1];
    mask[0] = false;
    let hits = (0..reps)
        .filter(|&r| {
            let (y, x) = sparse_problem(n, p, 1_000 + r);
            let opts = LassoOptions {
                seed: r,
                ..LassoOptions::default()
            };
            let path = fit_lasso_logistic(&y, &x, &vec![0.0; n], &vec![1.0; n], &mask, &opts).unwrap();
            let beta = path.selected_coefficients();
            (1..=3).all(|j| beta[j] != 0.0)
        })
        .count();
    assert!(hits * 10 >= reps as usize * 9, "support recovered in {hits}/{reps} replicates");
}

#[test]
fn kkt_holds_along_sparse_path() {
    let (y, x) = sparse_problem(300, 8, 77);
    let mut mask = vec![true; 9];
    mask[0] = false;
    let n = y.len();
    let opts = LassoOptions {
        folds: 3,
        ..LassoOptions::default()
    };
    let path = fit_lasso_logistic(&y, &x, &vec![0.0; n], &vec![1.0; n], &mask, &opts).unwrap();
    for (lambda, beta) in path.lambdas.iter().zip(&path.coefficients) {
        let v = kkt_max_violation(&y, &x, &vec![0.0; n], &vec![1.0; n], &mask, &path.column_scale, *lambda, beta);
        assert!(v <= 1e-6, "KKT violation {v} at lambda {lambda}");
    }
}

#[test]
fn offset_at_truth_gives_null_intercept() {
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut y = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.random_range(0.05..0.95);
        offset.push(logit(p));
        y.push(f64::from(u8::from(rng.random::<f64>() < p)));
    }
    let x = DMatrix::from_element(n, 1, 1.0);
    let fit = fit_logistic(&y, &x, &offset, &vec![1.0; n], &IrlsOptions::default()).unwrap();
    let se = fit.standard_errors().unwrap()[0];
    assert!(fit.coefficients[0].abs() <= 3.0 * se, "intercept {} se {se}", fit.coefficients[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn converged_irls_solves_score(seed in 0u64..10_000, n in 60usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < expit(0.2 + x[(i, 1)] - 0.5 * x[(i, 2)]))))
            .collect();
        if let Ok(fit) = fit_logistic(&y, &x, &vec![0.0; n], &vec![1.0; n], &IrlsOptions::default()) {
            if fit.converged {
                prop_assert!(fit.max_abs_score() <= 1e-8);
            }
            let info = &fit.info_matrix;
            prop_assert!((info - info.transpose()).abs().max() < 1e-12);
        }
    }
}
