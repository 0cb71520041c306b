//! L1-penalized logistic regression over a descending penalty grid.
//!
//! Each penalty is solved by proximal Newton: a weighted quadratic model of
//! the log-likelihood is minimized by cyclic coordinate descent on its Gram
//! matrix, followed by a backtracking step on the penalized objective.
//! Penalized columns are scaled to unit weighted standard deviation before
//! fitting, so the penalty acts on standardized coefficients; returned
//! coefficients are on the original column scale.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::irls::{fit_logistic, IrlsOptions};
use super::{bernoulli_nll, dot, linear_predictor, mean_from_logit, weighted_gram, xt_vec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub n_lambda: usize,
    /// Smallest penalty as a fraction of `lambda_max`.
    pub lambda_min_ratio: f64,
    pub folds: usize,
    /// Seeds the (case-stratified) fold assignment.
    pub seed: u64,
    /// KKT tolerance on the averaged score.
    pub tol: f64,
    pub max_outer: usize,
    pub irls: IrlsOptions,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            folds: 10,
            seed: 0,
            tol: 1e-7,
            max_outer: 200,
            irls: IrlsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    /// Full-data coefficients per penalty, original column scale.
    pub coefficients: Vec<Vec<f64>>,
    /// Mean held-out deviance per penalty.
    pub cv_deviance: Vec<f64>,
    /// Standard error of the fold deviances per penalty.
    pub cv_se: Vec<f64>,
    /// Index of the penalty with minimum `cv_deviance`.
    pub selected: usize,
    pub penalized: Vec<bool>,
    /// Scale applied to each column before penalization.
    pub column_scale: Vec<f64>,
    /// Penalties dropped from the end of the grid because a fit failed there.
    pub truncated: usize,
}

impl LassoPath {
    pub fn selected_lambda(&self) -> f64 {
        self.lambdas[self.selected]
    }

    pub fn selected_coefficients(&self) -> &[f64] {
        &self.coefficients[self.selected]
    }
}

struct Problem<'a> {
    y: &'a [f64],
    x: DMatrix<f64>,
    offset: &'a [f64],
    /// Normalized to sum to one.
    w: Vec<f64>,
    penalized: &'a [bool],
}

impl Problem<'_> {
    fn penalty(&self, beta: &[f64]) -> f64 {
        beta.iter()
            .zip(self.penalized)
            .filter(|(_, &p)| p)
            .map(|(b, _)| b.abs())
            .sum()
    }

    fn mean_nll(&self, beta: &[f64]) -> f64 {
        let eta = linear_predictor(&self.x, beta, self.offset);
        eta.iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((&e, &y), &w)| w * bernoulli_nll(y, mean_from_logit(e)))
            .sum()
    }

    fn objective(&self, beta: &[f64], lambda: f64) -> f64 {
        self.mean_nll(beta) + lambda * self.penalty(beta)
    }

    /// Averaged score and curvature weights at `beta`.
    fn score_and_weights(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, score, v) = self.evaluate(beta);
        (score, v)
    }

    /// Mean negative log-likelihood, averaged score and curvature weights
    /// from a single pass over the rows.
    fn evaluate(&self, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let eta = linear_predictor(&self.x, beta, self.offset);
        let mut resid = vec![0.0; eta.len()];
        let mut v = vec![0.0; eta.len()];
        let mut nll = 0.0;
        for i in 0..eta.len() {
            let p = mean_from_logit(eta[i]);
            nll += self.w[i] * bernoulli_nll(self.y[i], p);
            resid[i] = self.w[i] * (self.y[i] - p);
            v[i] = self.w[i] * p * (1.0 - p);
        }
        let score = (0..self.x.ncols())
            .map(|j| dot(self.x.column(j).as_slice(), &resid))
            .collect();
        (nll, score, v)
    }
}

fn kkt_violation(score: &[f64], beta: &[f64], penalized: &[bool], lambda: f64) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..score.len() {
        let v = if !penalized[j] {
            score[j].abs()
        } else if beta[j] != 0.0 {
            (score[j] - lambda * beta[j].signum()).abs()
        } else {
            (score[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Solves one penalty in place, starting from `beta`.
fn solve(prob: &Problem, lambda: f64, beta: &mut [f64], opts: &LassoOptions) -> Result<()> {
    let p = beta.len();
    for _ in 0..opts.max_outer {
        let (nll, score, v) = prob.evaluate(beta);
        if kkt_violation(&score, beta, prob.penalized, lambda) <= opts.tol {
            return Ok(());
        }
        let gram = weighted_gram(&prob.x, &v);

        // coordinate descent on the quadratic model, in terms of d = beta' - beta
        let mut d = vec![0.0; p];
        let mut gd = vec![0.0; p];
        for _sweep in 0..10_000 {
            let mut max_change = 0.0f64;
            for j in 0..p {
                let gjj = gram[(j, j)];
                if gjj <= 1e-14 {
                    continue;
                }
                let cur = beta[j] + d[j];
                let z = gjj * cur + score[j] - gd[j];
                let new = if prob.penalized[j] {
                    soft_threshold(z, lambda) / gjj
                } else {
                    z / gjj
                };
                let delta = new - cur;
                if delta != 0.0 {
                    d[j] += delta;
                    for k in 0..p {
                        gd[k] += delta * gram[(k, j)];
                    }
                    max_change = max_change.max(delta.abs() * gjj.sqrt());
                }
            }
            if max_change < 1e-14 {
                break;
            }
        }

        let f0 = nll + lambda * prob.penalty(beta);
        let mut t = 1.0;
        let mut accepted = false;
        let mut cand = vec![0.0; p];
        for _ in 0..40 {
            for j in 0..p {
                cand[j] = beta[j] + t * d[j];
            }
            if prob.objective(&cand, lambda) <= f0 + 1e-15 * f0.abs() {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let step = d.iter().fold(0.0f64, |m, x| m.max((t * x).abs()));
        if accepted {
            beta.copy_from_slice(&cand);
        }
        let max_coef = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if max_coef > opts.irls.separation_threshold {
            return Err(Error::Separation {
                max_coef,
                threshold: opts.irls.separation_threshold,
            });
        }
        if !accepted || step < 1e-15 {
            // numerically stationary; accept if within a loose band
            let (score, _) = prob.score_and_weights(beta);
            let viol = kkt_violation(&score, beta, prob.penalized, lambda);
            if viol <= opts.tol.max(1e-7) {
                return Ok(());
            }
            return Err(Error::NonConvergence {
                iterations: opts.max_outer,
                max_score: viol,
            });
        }
    }
    let (score, _) = prob.score_and_weights(beta);
    let viol = kkt_violation(&score, beta, prob.penalized, lambda);
    if viol <= opts.tol.max(1e-7) {
        Ok(())
    } else {
        Err(Error::NonConvergence {
            iterations: opts.max_outer,
            max_score: viol,
        })
    }
}

/// Unpenalized fit on the unpenalized columns only, as a full-length vector.
fn unpenalized_start(prob: &Problem, opts: &LassoOptions) -> Result<Vec<f64>> {
    let p = prob.x.ncols();
    let free: Vec<usize> = (0..p).filter(|&j| !prob.penalized[j]).collect();
    let mut beta = vec![0.0; p];
    if free.is_empty() {
        return Ok(beta);
    }
    let sub = prob.x.select_columns(&free);
    let fit = fit_logistic(prob.y, &sub, prob.offset, &prob.w, &opts.irls)?;
    for (k, &j) in free.iter().enumerate() {
        beta[j] = fit.coefficients[k];
    }
    Ok(beta)
}

/// Fits the penalty path from `start` downward; stops at the first failure
/// and returns the solved prefix together with the error.
fn run_path(
    prob: &Problem,
    lambdas: &[f64],
    start: Vec<f64>,
    opts: &LassoOptions,
) -> (Vec<Vec<f64>>, Option<Error>) {
    let mut beta = start;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if let Err(e) = solve(prob, lambda, &mut beta, opts) {
            return (out, Some(e));
        }
        out.push(beta.clone());
    }
    (out, None)
}

fn column_scales(x: &DMatrix<f64>, w: &[f64], penalized: &[bool]) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| {
            if !penalized[j] {
                return 1.0;
            }
            let col = x.column(j);
            let mean: f64 = col.iter().zip(w).map(|(v, w)| v * w).sum();
            let var: f64 = col.iter().zip(w).map(|(v, w)| w * (v - mean).powi(2)).sum();
            let sd = var.sqrt();
            if sd > 1e-12 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Case-stratified fold labels.
fn assign_folds(y: &[f64], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; y.len()];
    let mut next = 0;
    for class in [1.0, 0.0] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    folds
}

/// Lasso-penalized logistic regression path with K-fold cross-validation.
///
/// Columns whose `penalized` flag is false are never penalized. The grid has
/// `n_lambda` log-spaced penalties from `lambda_max` (the smallest penalty
/// that zeroes every penalized coefficient) down to
/// `lambda_min_ratio * lambda_max`; the selected penalty minimizes the mean
/// held-out deviance.
pub fn fit_lasso_logistic(
    y: &[f64],
    x: &DMatrix<f64>,
    offset: &[f64],
    weights: &[f64],
    penalized: &[bool],
    opts: &LassoOptions,
) -> Result<LassoPath> {
    let n = y.len();
    let p = x.ncols();
    if opts.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", opts.folds)));
    }
    if p == 0 || penalized.len() != p {
        return Err(Error::Config("penalized mask must match the column count".into()));
    }
    if x.nrows() != n || offset.len() != n || weights.len() != n {
        return Err(Error::Config("inconsistent input lengths".into()));
    }
    if n < opts.folds {
        return Err(Error::Config(format!("{n} rows cannot fill {} folds", opts.folds)));
    }

    let w = normalized(weights);
    let scale = column_scales(x, &w, penalized);
    let mut xs = x.clone();
    for (j, s) in scale.iter().enumerate() {
        if *s != 1.0 {
            xs.column_mut(j).unscale_mut(*s);
        }
    }

    let full = Problem {
        y,
        x: xs.clone(),
        offset,
        w: w.clone(),
        penalized,
    };
    let start = unpenalized_start(&full, opts)?;
    let (score, _) = full.score_and_weights(&start);
    let lambda_max = (0..p)
        .filter(|&j| penalized[j])
        .map(|j| score[j].abs())
        .fold(0.0f64, f64::max);
    let lambdas: Vec<f64> = (0..opts.n_lambda)
        .map(|k| {
            let frac = if opts.n_lambda > 1 {
                k as f64 / (opts.n_lambda - 1) as f64
            } else {
                0.0
            };
            lambda_max * opts.lambda_min_ratio.powf(frac)
        })
        .collect();

    let (mut path, full_err) = run_path(&full, &lambdas, start, opts);
    if path.is_empty() {
        return Err(full_err.expect("empty path implies an error"));
    }

    let fold_of = assign_folds(y, opts.folds, opts.seed);
    let fold_results: Vec<(Vec<f64>, f64)> = (0..opts.folds)
        .into_par_iter()
        .map(|f| -> Result<(Vec<f64>, f64)> {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let y_tr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let off_tr: Vec<f64> = train.iter().map(|&i| offset[i]).collect();
            let w_tr = normalized(&train.iter().map(|&i| weights[i]).collect::<Vec<_>>());
            let prob = Problem {
                y: &y_tr,
                x: xs.select_rows(&train),
                offset: &off_tr,
                w: w_tr,
                penalized,
            };
            let start = unpenalized_start(&prob, opts)?;
            let (betas, _) = run_path(&prob, &lambdas[..path.len()], start, opts);
            if betas.is_empty() {
                return Err(Error::NonConvergence {
                    iterations: opts.max_outer,
                    max_score: f64::NAN,
                });
            }
            let x_te = xs.select_rows(&test);
            let off_te: Vec<f64> = test.iter().map(|&i| offset[i]).collect();
            let devs = betas
                .iter()
                .map(|b| {
                    let eta = linear_predictor(&x_te, b, &off_te);
                    let dev: f64 = test
                        .iter()
                        .zip(&eta)
                        .map(|(&i, &e)| 2.0 * weights[i] * bernoulli_nll(y[i], mean_from_logit(e)))
                        .sum();
                    dev
                })
                .collect();
            let test_w: f64 = test.iter().map(|&i| weights[i]).sum();
            Ok((devs, test_w))
        })
        .collect::<Result<Vec<_>>>()?;

    let usable = fold_results
        .iter()
        .map(|(d, _)| d.len())
        .min()
        .unwrap_or(0)
        .min(path.len());
    path.truncate(usable);
    let total_w: f64 = weights.iter().sum();
    let mut cv_deviance = Vec::with_capacity(usable);
    let mut cv_se = Vec::with_capacity(usable);
    for k in 0..usable {
        let per_fold: Vec<f64> = fold_results
            .iter()
            .map(|(d, tw)| d[k] / tw.max(f64::MIN_POSITIVE))
            .collect();
        let mean = fold_results.iter().map(|(d, _)| d[k]).sum::<f64>() / total_w;
        let kf = per_fold.len() as f64;
        let fold_mean = per_fold.iter().sum::<f64>() / kf;
        let var = per_fold.iter().map(|d| (d - fold_mean).powi(2)).sum::<f64>() / (kf - 1.0);
        cv_deviance.push(mean);
        cv_se.push((var / kf).sqrt());
    }
    let selected = cv_deviance
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0;

    let coefficients = path
        .into_iter()
        .map(|b| b.iter().zip(&scale).map(|(c, s)| c / s).collect())
        .collect();
    Ok(LassoPath {
        truncated: lambdas.len() - usable,
        lambdas: lambdas[..usable].to_vec(),
        coefficients,
        cv_deviance,
        cv_se,
        selected,
        penalized: penalized.to_vec(),
        column_scale: scale,
    })
}

/// Largest violation of the lasso optimality conditions at `beta` (original
/// column scale), measured on the standardized scale the penalty acts on.
pub fn kkt_max_violation(
    y: &[f64],
    x: &DMatrix<f64>,
    offset: &[f64],
    weights: &[f64],
    penalized: &[bool],
    column_scale: &[f64],
    lambda: f64,
    beta: &[f64],
) -> f64 {
    let w = normalized(weights);
    let eta = linear_predictor(x, beta, offset);
    let resid: Vec<f64> = eta
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((&e, &yi), &wi)| wi * (yi - mean_from_logit(e)))
        .collect();
    let score_raw = xt_vec(x, &resid);
    let score: Vec<f64> = score_raw.iter().zip(column_scale).map(|(g, s)| g / s).collect();
    let beta_std: Vec<f64> = beta.iter().zip(column_scale).map(|(b, s)| b * s).collect();
    kkt_violation(&score, &beta_std, penalized, lambda)
}
