use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{bernoulli_nll, linear_predictor, mean_from_logit, weighted_gram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    /// Convergence when the max absolute (weight-averaged) score is below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Any |coefficient| above this on the logit scale is treated as separation.
    pub separation_threshold: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            separation_threshold: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub neg_log_likelihood: f64,
    /// Observed information `Xᵀ diag(w μ(1-μ)) X` at the solution.
    pub info_matrix: DMatrix<f64>,
    /// Weight-averaged score at the solution.
    pub score: Vec<f64>,
    /// Negative log-likelihood after each accepted step, starting from the
    /// initial point.
    pub nll_trace: Vec<f64>,
}

impl GlmFit {
    pub fn max_abs_score(&self) -> f64 {
        self.score.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Model-based covariance, the inverse observed information.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        invert_spd(&self.info_matrix)
    }

    pub fn standard_errors(&self) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        Ok((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
    }
}

pub(crate) fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("information matrix is not invertible".into()))
}

struct Eval {
    nll: f64,
    score: Vec<f64>,
    info: DMatrix<f64>,
}

fn evaluate(y: &[f64], x: &DMatrix<f64>, offset: &[f64], w: &[f64], beta: &[f64]) -> Eval {
    let eta = linear_predictor(x, beta, offset);
    let total_w: f64 = w.iter().sum();
    let mut resid = vec![0.0; y.len()];
    let mut var = vec![0.0; y.len()];
    let mut nll = 0.0;
    for i in 0..y.len() {
        let p = mean_from_logit(eta[i]);
        nll += w[i] * bernoulli_nll(y[i], p);
        resid[i] = w[i] * (y[i] - p);
        var[i] = w[i] * p * (1.0 - p);
    }
    let score = x
        .tr_mul(&DVector::from_column_slice(&resid))
        .iter()
        .map(|s| s / total_w)
        .collect();
    Eval {
        nll,
        score,
        info: weighted_gram(x, &var),
    }
}

fn nll_at(y: &[f64], x: &DMatrix<f64>, offset: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let eta = linear_predictor(x, beta, offset);
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| wi * bernoulli_nll(yi, mean_from_logit(e)))
        .sum()
}

/// Maximum-likelihood logistic regression of `y` on `x` with a fixed offset
/// and nonnegative case weights, by Newton-Raphson with step halving.
pub fn fit_logistic(
    y: &[f64],
    x: &DMatrix<f64>,
    offset: &[f64],
    weights: &[f64],
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    let n = y.len();
    let p = x.ncols();
    if p == 0 {
        return Err(Error::Config("design matrix has no columns".into()));
    }
    if x.nrows() != n || offset.len() != n || weights.len() != n {
        return Err(Error::Config(format!(
            "inconsistent lengths: y={n}, X rows={}, offset={}, weights={}",
            x.nrows(),
            offset.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("weights must be finite and nonnegative".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("total weight is zero".into()));
    }

    let mut beta = vec![0.0; p];
    let mut ev = evaluate(y, x, offset, weights, &beta);
    let mut trace = vec![ev.nll];
    let mut iterations = 0;
    loop {
        let max_score = ev.score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max_score <= opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                max_score,
            });
        }
        iterations += 1;

        let total_w: f64 = weights.iter().sum();
        let grad = DVector::from_iterator(p, ev.score.iter().map(|s| s * total_w));
        let step = match ev.info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => ev
                .info
                .clone()
                .lu()
                .solve(&grad)
                .ok_or_else(|| Error::Singular("information matrix is singular".into()))?,
        };

        let mut t = 1.0;
        let mut candidate: Vec<f64>;
        let mut cand_nll;
        let mut halvings = 0;
        loop {
            candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            cand_nll = nll_at(y, x, offset, weights, &candidate);
            if cand_nll <= ev.nll * (1.0 + 1e-14) + 1e-12 || halvings >= 40 {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        if cand_nll > ev.nll * (1.0 + 1e-14) + 1e-12 {
            // no descent possible along the Newton direction
            return Err(Error::NonConvergence {
                iterations,
                max_score,
            });
        }
        beta = candidate;
        let max_coef = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if max_coef > opts.separation_threshold {
            return Err(Error::Separation {
                max_coef,
                threshold: opts.separation_threshold,
            });
        }
        ev = evaluate(y, x, offset, weights, &beta);
        trace.push(ev.nll);
    }

    Ok(GlmFit {
        coefficients: beta,
        converged: true,
        iterations,
        neg_log_likelihood: ev.nll,
        info_matrix: ev.info,
        score: ev.score,
        nll_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Expands a 2×2 table of (y, a) counts into rows.
    fn table(counts: [(f64, f64, usize); 4]) -> (Vec<f64>, Vec<f64>) {
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (y, a, c) in counts {
            for _ in 0..c {
                ys.push(y);
                xs.push(a);
            }
        }
        (ys, xs)
    }

    fn with_intercept(col: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(col.len(), 2, |i, j| if j == 0 { 1.0 } else { col[i] })
    }

    #[test]
    fn saturated_two_by_two_equals_empirical_log_odds_ratio() {
        // Y=1: A=1 30, A=0 10; Y=0: A=1 20, A=0 40. Regress A on Y.
        let (ys, a) = table([(1.0, 1.0, 30), (1.0, 0.0, 10), (0.0, 1.0, 20), (0.0, 0.0, 40)]);
        let oracle = ((30.0 * 40.0) / (10.0 * 20.0_f64)).ln();
        let x = with_intercept(&ys);
        let n = a.len();
        let fit = fit_logistic(&a, &x, &vec![0.0; n], &vec![1.0; n], &IrlsOptions::default()).unwrap();
        assert!((fit.coefficients[1] - oracle).abs() < 1e-8);
        assert!((oracle - 1.791_759_469_228_055).abs() < 1e-12);
        // intercept is the noncase log-odds of exposure
        assert!((fit.coefficients[0] - (20.0f64 / 40.0).ln()).abs() < 1e-8);
        assert!(fit.max_abs_score() <= 1e-8);
        // Woolf variance of the log OR
        let se = fit.standard_errors().unwrap()[1];
        let woolf = (1.0 / 30.0 + 1.0 / 10.0 + 1.0 / 20.0 + 1.0 / 40.0f64).sqrt();
        assert!((se - woolf).abs() < 1e-6);
    }

    #[test]
    fn all_zero_response_is_separation() {
        let n = 20;
        let y = vec![0.0; n];
        let x = DMatrix::from_element(n, 1, 1.0);
        let err = fit_logistic(&y, &x, &vec![0.0; n], &vec![1.0; n], &IrlsOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err}");
    }

    #[test]
    fn offset_at_truth_gives_zero_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let offset: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = offset
            .iter()
            .map(|&o| if rng.random::<f64>() < super::super::expit(o) { 1.0 } else { 0.0 })
            .collect();
        let x = DMatrix::from_element(n, 1, 1.0);
        let fit = fit_logistic(&y, &x, &offset, &vec![1.0; n], &IrlsOptions::default()).unwrap();
        let se = fit.standard_errors().unwrap()[0];
        assert!(fit.coefficients[0].abs() < 3.0 * se, "{} vs se {se}", fit.coefficients[0]);
    }

    #[test]
    fn inconsistent_lengths_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(fit_logistic(&[0.0, 1.0], &x, &[0.0; 3], &[1.0; 3], &IrlsOptions::default()).is_err());
    }

    fn sim_data(seed: u64, n: usize) -> (Vec<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.5..1.5) });
        let y = (0..n)
            .map(|i| {
                let eta = 0.3 - 0.8 * x[(i, 1)] + 1.2 * x[(i, 2)];
                if rng.random::<f64>() < super::super::expit(eta) { 1.0 } else { 0.0 }
            })
            .collect();
        (y, x)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn duplicated_half_weight_rows_give_same_fit(seed in 0u64..10_000) {
            let (y, x) = sim_data(seed, 120);
            let n = y.len();
            let base = fit_logistic(&y, &x, &vec![0.0; n], &vec![1.0; n], &IrlsOptions::default()).unwrap();
            let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
            let x2 = DMatrix::from_fn(2 * n, 3, |i, j| x[(i % n, j)]);
            let dup = fit_logistic(&y2, &x2, &vec![0.0; 2 * n], &vec![0.5; 2 * n], &IrlsOptions::default()).unwrap();
            for (a, b) in base.coefficients.iter().zip(&dup.coefficients) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn nll_never_increases(seed in 0u64..10_000) {
            let (y, x) = sim_data(seed, 80);
            let n = y.len();
            let offset: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let fit = fit_logistic(&y, &x, &offset, &vec![1.0; n], &IrlsOptions::default()).unwrap();
            for w in fit.nll_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            let info = &fit.info_matrix;
            prop_assert!((info - info.transpose()).amax() < 1e-9);
        }
    }
}
