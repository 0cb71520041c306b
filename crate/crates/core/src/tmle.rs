//! Targeted estimation of the partially linear logistic coefficient
//!
//! ```text
//! logit P(A = 1 | Y = y, X = x, Δ = 1) = y βᵀ f(x) + h(x)
//! ```
//!
//! from test-negative data where `A` is only observed on `Δ = 1` rows.
//! The initial fit is an L1-penalized logistic regression of `A` on
//! `[y f(x), 1, basis(x)]` with the first two blocks unpenalized. The
//! targeting step then moves `μ(y, x)` along
//!
//! ```text
//! logit μ_ε(y, x) = logit μ(y, x) + εᵀ f(x) H(y, x)
//! ```
//!
//! until the empirical mean of the efficient influence function is
//! negligible. Because `H(1, x) - H(0, x) = 1` the update is equivalent to
//! `β ← β + ε`, `h ← h + εᵀ f H(0, ·)`, so every iterate stays inside the
//! partially linear model.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::design::{EffectDesign, NuisanceBasis};
use crate::error::{Error, Result};
use crate::solvers::{
    fit_lasso_logistic, fit_logistic, mean_from_logit, IrlsOptions, LassoOptions,
};

/// Condition number of `Λ⁻¹` above which a warning is logged.
pub const CONDITION_WARN: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InitialOptions {
    pub lasso: LassoOptions,
    /// Number of cross-fitting folds; `None` fits nuisances on all rows.
    pub cross_fit: Option<usize>,
    pub seed: u64,
}

/// `intercept + coefficientsᵀ basis(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScore {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

impl LinearScore {
    fn eval(&self, basis_row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(basis_row)
                .map(|(c, b)| c * b)
                .sum::<f64>()
    }

    pub fn nonzero(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

/// Initial (plug-in) estimate: `β`, the nuisance `h` and `π̃(x) = P(Y = 1 | Δ = 1, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub beta_init: Vec<f64>,
    /// One model without cross-fitting, otherwise one per fold.
    pub h_models: Vec<LinearScore>,
    pub pi_tilde_models: Vec<LinearScore>,
    /// Fold of each dataset row when cross-fitting.
    pub fold_assignments: Option<Vec<usize>>,
    pub basis: NuisanceBasis,
}

impl NuisanceFit {
    fn model_for(&self, row: usize) -> usize {
        self.fold_assignments.as_ref().map_or(0, |f| f[row])
    }

    /// `h(x)` for dataset row `row` (the row index selects the fold model).
    pub fn h(&self, row: usize, x: &[f64]) -> f64 {
        self.h_models[self.model_for(row)].eval(&self.basis.eval(x))
    }

    /// Clipped `π̃(x)`.
    pub fn pi_tilde(&self, row: usize, x: &[f64]) -> f64 {
        mean_from_logit(self.pi_tilde_models[self.model_for(row)].eval(&self.basis.eval(x)))
    }

    /// Clipped `μ(y, x) = expit(y βᵀ f(x) + h(x))`.
    pub fn mu(&self, row: usize, y: bool, fx: &[f64], x: &[f64]) -> f64 {
        let lin: f64 = self.beta_init.iter().zip(fx).map(|(b, f)| b * f).sum();
        mean_from_logit(if y { lin } else { 0.0 } + self.h(row, x))
    }

    pub fn clever_covariate(&self, row: usize, y: bool, fx: &[f64], x: &[f64]) -> f64 {
        clever_covariate(
            self.pi_tilde(row, x),
            self.mu(row, true, fx, x),
            self.mu(row, false, fx, x),
            y,
        )
    }

    /// Per-row state used by the influence function and the targeting loop.
    pub fn state(&self, ds: &Dataset, design: &EffectDesign) -> FitState {
        let f = design.matrix(ds);
        let n = ds.n();
        let mut logit_mu1 = Vec::with_capacity(n);
        let mut logit_mu0 = Vec::with_capacity(n);
        let mut pi = Vec::with_capacity(n);
        for (i, row) in ds.rows().iter().enumerate() {
            let h = self.h(i, &row.x);
            let lin: f64 = (0..f.ncols()).map(|k| self.beta_init[k] * f[(i, k)]).sum();
            logit_mu0.push(h);
            logit_mu1.push(h + lin);
            pi.push(self.pi_tilde(i, &row.x));
        }
        FitState {
            beta: self.beta_init.clone(),
            logit_mu1,
            logit_mu0,
            pi_tilde: pi,
            f,
        }
    }
}

/// Row-wise evaluation of a fit in the partially linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub beta: Vec<f64>,
    /// `logit μ(1, x_i)` before clipping.
    pub logit_mu1: Vec<f64>,
    /// `logit μ(0, x_i) = h(x_i)` before clipping.
    pub logit_mu0: Vec<f64>,
    /// Clipped `π̃(x_i)`, held fixed during targeting.
    pub pi_tilde: Vec<f64>,
    /// `f(x_i)` rows.
    pub f: DMatrix<f64>,
}

impl FitState {
    pub fn n(&self) -> usize {
        self.pi_tilde.len()
    }

    pub fn mu(&self, i: usize, y: bool) -> f64 {
        mean_from_logit(if y { self.logit_mu1[i] } else { self.logit_mu0[i] })
    }

    pub fn clever(&self, i: usize, y: bool) -> f64 {
        clever_covariate(self.pi_tilde[i], self.mu(i, true), self.mu(i, false), y)
    }

    /// Largest `|logit μ(1,x) − logit μ(0,x) − βᵀ f(x)|` over rows.
    pub fn constraint_gap(&self) -> f64 {
        (0..self.n())
            .map(|i| {
                let lin: f64 = self.beta.iter().enumerate().map(|(k, b)| b * self.f[(i, k)]).sum();
                (self.logit_mu1[i] - self.logit_mu0[i] - lin).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// `H(y, x) = y − π̃ σ²(1,x) / (π̃ σ²(1,x) + (1 − π̃) σ²(0,x))` with
/// `σ²(y,x) = μ(y,x)(1 − μ(y,x))`.
pub fn clever_covariate(pi_tilde: f64, mu1: f64, mu0: f64, y: bool) -> f64 {
    let s1 = mu1 * (1.0 - mu1);
    let s0 = mu0 * (1.0 - mu0);
    let weight = pi_tilde * s1 / (pi_tilde * s1 + (1.0 - pi_tilde) * s0);
    (if y { 1.0 } else { 0.0 }) - weight
}

fn overlap_check(ds: &Dataset) -> Result<()> {
    let mut seen = [false; 2];
    for (_, row) in ds.observed_rows() {
        seen[row.y as usize] = true;
    }
    if !seen[0] || !seen[1] {
        return Err(Error::InvalidData(
            "need delta=1 rows with both y=1 and y=0 to fit the initial model".into(),
        ));
    }
    Ok(())
}

struct NuisanceModels {
    beta: Vec<f64>,
    h: LinearScore,
    pi: LinearScore,
}

fn fit_models(
    ds: &Dataset,
    design: &EffectDesign,
    basis: &NuisanceBasis,
    rows: &[usize],
    opts: &LassoOptions,
) -> Result<NuisanceModels> {
    let b = design.dim();
    let p = basis.dim();
    let n = rows.len();
    let basis_m = basis.matrix(ds, rows);
    let mut fbuf = vec![0.0; b];

    // A ~ [y f(x) | 1 | basis(x)]
    let mut xa = DMatrix::zeros(n, b + 1 + p);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (r, &i) in rows.iter().enumerate() {
        let row = &ds.rows()[i];
        design.eval_into(&row.x, &mut fbuf);
        let yi = row.y_f64();
        for k in 0..b {
            xa[(r, k)] = yi * fbuf[k];
        }
        xa[(r, b)] = 1.0;
        for k in 0..p {
            xa[(r, b + 1 + k)] = basis_m[(r, k)];
        }
        a.push(row.delta_a());
        y.push(yi);
    }
    let mut mask = vec![false; b + 1];
    mask.extend(std::iter::repeat_n(true, p));
    let zeros = vec![0.0; n];
    let ones = vec![1.0; n];
    let a_path = fit_lasso_logistic(&a, &xa, &zeros, &ones, &mask, opts)?;
    let coef = a_path.selected_coefficients();
    let beta = coef[..b].to_vec();
    let h = LinearScore {
        intercept: coef[b],
        coefficients: coef[b + 1..].to_vec(),
        lambda: a_path.selected_lambda(),
    };

    // Y ~ [1 | basis(x)] among delta = 1
    let xy = xa.columns(b, p + 1).into_owned();
    let mut mask = vec![false];
    mask.extend(std::iter::repeat_n(true, p));
    let pi_path = fit_lasso_logistic(&y, &xy, &zeros, &ones, &mask, opts)?;
    let coef = pi_path.selected_coefficients();
    let pi = LinearScore {
        intercept: coef[0],
        coefficients: coef[1..].to_vec(),
        lambda: pi_path.selected_lambda(),
    };
    Ok(NuisanceModels { beta, h, pi })
}

/// Initial partially linear logistic fit among `Δ = 1` rows.
pub fn fit_initial(
    ds: &Dataset,
    design: &EffectDesign,
    basis: &NuisanceBasis,
    opts: &InitialOptions,
) -> Result<NuisanceFit> {
    overlap_check(ds)?;
    let observed: Vec<usize> = ds.observed_rows().map(|(i, _)| i).collect();
    let full = fit_models(ds, design, basis, &observed, &opts.lasso)?;

    let Some(k) = opts.cross_fit else {
        return Ok(NuisanceFit {
            beta_init: full.beta,
            h_models: vec![full.h],
            pi_tilde_models: vec![full.pi],
            fold_assignments: None,
            basis: basis.clone(),
        });
    };
    if k < 2 {
        return Err(Error::Config(format!("cross-fitting needs at least 2 folds, got {k}")));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let mut folds = vec![0; ds.n()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    let mut h_models = Vec::with_capacity(k);
    let mut pi_models = Vec::with_capacity(k);
    for fold in 0..k {
        let train: Vec<usize> = observed.iter().copied().filter(|&i| folds[i] != fold).collect();
        let sub = ds.subset(&train)?;
        overlap_check(&sub)?;
        let all: Vec<usize> = (0..train.len()).collect();
        let m = fit_models(&sub, design, basis, &all, &opts.lasso)?;
        h_models.push(m.h);
        pi_models.push(m.pi);
    }
    Ok(NuisanceFit {
        beta_init: full.beta,
        h_models,
        pi_tilde_models: pi_models,
        fold_assignments: Some(folds),
        basis: basis.clone(),
    })
}

/// Efficient influence function evaluated at a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Eif {
    /// `n × b`, one row per observation.
    pub values: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub lambda_inv: DMatrix<f64>,
    pub mean: Vec<f64>,
    /// Averaged fluctuation score `(1/n) Σ Δ f(x) H (A − μ)`.
    pub score: Vec<f64>,
    pub condition_number: f64,
}

/// `D(o) = (Λ f(x)) δ H(y,x) (δa − μ(y,x))`, with `Λ⁻¹` the empirical mean
/// of `f fᵀ Δ (1 − π̃) π̃ σ²(1,x) σ²(0,x) / ((1 − π̃) σ²(0,x) + π̃ σ²(1,x))`.
pub fn compute_eif(state: &FitState, ds: &Dataset) -> Result<Eif> {
    let n = ds.n();
    let b = state.f.ncols();
    let mut lambda_inv = DMatrix::<f64>::zeros(b, b);
    let mut resid = vec![0.0; n];
    for (i, row) in ds.rows().iter().enumerate() {
        if !row.delta() {
            continue;
        }
        let pi = state.pi_tilde[i];
        let m1 = state.mu(i, true);
        let m0 = state.mu(i, false);
        let s1 = m1 * (1.0 - m1);
        let s0 = m0 * (1.0 - m0);
        let weight = (1.0 - pi) * pi * s1 * s0 / ((1.0 - pi) * s0 + pi * s1);
        for j in 0..b {
            for k in 0..b {
                lambda_inv[(j, k)] += weight * state.f[(i, j)] * state.f[(i, k)];
            }
        }
        let h = clever_covariate(pi, m1, m0, row.y);
        resid[i] = h * (row.delta_a() - state.mu(i, row.y));
    }
    lambda_inv /= n as f64;

    let eig = SymmetricEigen::new(lambda_inv.clone());
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_ev > 0.0) || min_ev <= max_ev * 1e-14 {
        let rank = eig.eigenvalues.iter().filter(|&&e| e > max_ev.max(0.0) * 1e-14).count();
        return Err(Error::Singular(format!(
            "scaling matrix has rank {rank} < {b}; the effect design is not identified on the observed rows"
        )));
    }
    let condition_number = max_ev / min_ev;
    if condition_number > CONDITION_WARN {
        warn!("scaling matrix is ill-conditioned (condition number {condition_number:.3e})");
    }
    let lambda = lambda_inv
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("scaling matrix inversion failed".into()))?;

    let mut values = DMatrix::zeros(n, b);
    let mut score = vec![0.0; b];
    let mut mean = vec![0.0; b];
    for i in 0..n {
        if resid[i] == 0.0 {
            continue;
        }
        let fi = state.f.row(i).transpose();
        let lf = &lambda * &fi;
        for k in 0..b {
            values[(i, k)] = lf[k] * resid[i];
            mean[k] += values[(i, k)];
            score[k] += fi[k] * resid[i];
        }
    }
    for k in 0..b {
        mean[k] /= n as f64;
        score[k] /= n as f64;
    }
    Ok(Eif {
        values,
        lambda,
        lambda_inv,
        mean,
        score,
        condition_number,
    })
}

/// `[(1/n) Σ D_i D_iᵀ] / n`.
pub fn eif_covariance(eif: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eif.nrows() as f64;
    eif.tr_mul(eif) / (n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetingOptions {
    /// Fixed stopping tolerance; `None` uses `max(1e-8, se_min / (√n log n))`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub irls: IrlsOptions,
}

impl Default for TargetingOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 50,
            irls: IrlsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetedEstimate {
    pub beta: Vec<f64>,
    pub beta_init: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub eif: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub epsilon_trace: Vec<Vec<f64>>,
    /// Model-constraint gap after each fluctuation.
    pub constraint_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub mean_eif: Vec<f64>,
    /// Stopping tolerance in force at the final iteration.
    pub tol: f64,
    pub condition_number: f64,
    pub state: FitState,
}

impl TargetedEstimate {
    pub fn n(&self) -> usize {
        self.eif.nrows()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.cov.nrows()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Coordinates whose estimated variance is exactly zero.
    pub fn degenerate_coordinates(&self) -> Vec<usize> {
        (0..self.cov.nrows()).filter(|&i| self.cov[(i, i)] == 0.0).collect()
    }
}

fn stopping_tol(opts: &TargetingOptions, cov: &DMatrix<f64>, n: usize) -> f64 {
    if let Some(t) = opts.tol {
        return t;
    }
    let se_min = (0..cov.nrows())
        .map(|i| cov[(i, i)].max(0.0).sqrt())
        .fold(f64::INFINITY, f64::min);
    let nf = n as f64;
    (se_min / (nf.sqrt() * nf.ln().max(1.0))).max(1e-8)
}

/// Iterative targeting of the initial fit. Each step fits an offset logistic
/// regression of `A` on the `b` columns `f(X) H(Y, X)` over `Δ = 1` rows,
/// with `π̃` held at its initial value and `H`, `Λ` recomputed from the
/// current `μ`.
pub fn tmle_update(
    nf: &NuisanceFit,
    ds: &Dataset,
    design: &EffectDesign,
    opts: &TargetingOptions,
) -> Result<TargetedEstimate> {
    if opts.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let mut state = nf.state(ds, design);
    let b = design.dim();
    let observed: Vec<usize> = ds.observed_rows().map(|(i, _)| i).collect();
    let n_obs = observed.len();
    let a: Vec<f64> = observed.iter().map(|&i| ds.rows()[i].delta_a()).collect();
    let ones = vec![1.0; n_obs];

    let mut epsilon_trace = Vec::new();
    let mut constraint_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut tol;
    let mut eif;
    loop {
        iterations += 1;
        let mut z = DMatrix::zeros(n_obs, b);
        let mut offset = Vec::with_capacity(n_obs);
        for (r, &i) in observed.iter().enumerate() {
            let y = ds.rows()[i].y;
            let h = state.clever(i, y);
            for k in 0..b {
                z[(r, k)] = state.f[(i, k)] * h;
            }
            offset.push(if y { state.logit_mu1[i] } else { state.logit_mu0[i] });
        }
        let fit = fit_logistic(&a, &z, &offset, &ones, &opts.irls)?;
        let eps = fit.coefficients;

        for i in 0..state.n() {
            let shift: f64 = (0..b).map(|k| eps[k] * state.f[(i, k)]).sum();
            let h1 = state.clever(i, true);
            let h0 = state.clever(i, false);
            state.logit_mu1[i] += shift * h1;
            state.logit_mu0[i] += shift * h0;
        }
        for (bk, ek) in state.beta.iter_mut().zip(&eps) {
            *bk += ek;
        }
        epsilon_trace.push(eps);
        constraint_trace.push(state.constraint_gap());

        eif = compute_eif(&state, ds)?;
        let cov = eif_covariance(&eif.values);
        tol = stopping_tol(opts, &cov, ds.n());
        if eif.mean.iter().all(|m| m.abs() <= tol) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            warn!(
                "targeting stopped after {iterations} iterations with mean EIF {:?}",
                eif.mean
            );
            break;
        }
    }

    let cov = eif_covariance(&eif.values);
    Ok(TargetedEstimate {
        beta: state.beta.clone(),
        beta_init: nf.beta_init.clone(),
        cov,
        eif: eif.values,
        lambda: eif.lambda,
        epsilon_trace,
        constraint_trace,
        iterations,
        converged,
        mean_eif: eif.mean,
        tol,
        condition_number: eif.condition_number,
        state,
    })
}

/// Covariance of `β̂` from the influence-function matrix.
pub fn estimate_variance(te: &TargetedEstimate) -> DMatrix<f64> {
    eif_covariance(&te.eif)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrEstimate {
    pub log_or: f64,
    pub se: f64,
    pub level: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub or: f64,
    pub or_ci_low: f64,
    pub or_ci_high: f64,
    pub ve_percent: f64,
    pub ve_ci_low: f64,
    pub ve_ci_high: f64,
}

/// Two-sided standard normal critical value for a confidence level.
pub fn normal_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Wald inference for `βᵀ fx` from a coefficient vector and covariance.
pub fn linear_contrast(beta: &[f64], cov: &DMatrix<f64>, fx: &[f64], level: f64) -> OrEstimate {
    let f = DVector::from_column_slice(fx);
    let log_or: f64 = beta.iter().zip(fx).map(|(b, x)| b * x).sum();
    let se = (f.transpose() * cov * &f)[(0, 0)].max(0.0).sqrt();
    let z = normal_critical(level);
    let (lo, hi) = (log_or - z * se, log_or + z * se);
    OrEstimate {
        log_or,
        se,
        level,
        ci_low: lo,
        ci_high: hi,
        or: log_or.exp(),
        or_ci_low: lo.exp(),
        or_ci_high: hi.exp(),
        ve_percent: (1.0 - log_or.exp()) * 100.0,
        ve_ci_low: (1.0 - hi.exp()) * 100.0,
        ve_ci_high: (1.0 - lo.exp()) * 100.0,
    }
}

/// Log odds ratio at effect-design vector `fx` with a delta-method Wald CI.
pub fn or_at_x(te: &TargetedEstimate, fx: &[f64], level: f64) -> OrEstimate {
    linear_contrast(&te.beta, &te.cov, fx, level)
}
