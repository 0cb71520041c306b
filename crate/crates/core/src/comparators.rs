//! Comparison estimators: ordinary logistic regression of case status on
//! exposure among phase-two rows, and the pseudo-likelihood version that
//! corrects for case/stratum-dependent phase-two sampling with an offset
//! `log(f₁ₛ / f₀ₛ)`, where `f_yₛ` is the phase-two sampling fraction of
//! status `y` in stratum `s`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::solvers::{fit_logistic, mean_from_logit, weighted_gram, IrlsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComparatorMethod {
    #[serde(rename = "MLEx")]
    MleX,
    #[serde(rename = "nMLE")]
    NaiveMle,
    #[serde(rename = "PLMx")]
    PlModelX,
    #[serde(rename = "PLEx")]
    PlEmpiricalX,
    #[serde(rename = "nPLM")]
    NaivePlModel,
    #[serde(rename = "nPLE")]
    NaivePlEmpirical,
}

impl ComparatorMethod {
    pub const ALL: [ComparatorMethod; 6] = [
        ComparatorMethod::PlModelX,
        ComparatorMethod::PlEmpiricalX,
        ComparatorMethod::MleX,
        ComparatorMethod::NaivePlModel,
        ComparatorMethod::NaivePlEmpirical,
        ComparatorMethod::NaiveMle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ComparatorMethod::MleX => "MLEx",
            ComparatorMethod::NaiveMle => "nMLE",
            ComparatorMethod::PlModelX => "PLMx",
            ComparatorMethod::PlEmpiricalX => "PLEx",
            ComparatorMethod::NaivePlModel => "nPLM",
            ComparatorMethod::NaivePlEmpirical => "nPLE",
        }
    }

    /// Adjusts for the interaction term as well as main effects.
    pub fn with_interaction(self) -> bool {
        matches!(
            self,
            ComparatorMethod::MleX | ComparatorMethod::PlModelX | ComparatorMethod::PlEmpiricalX
        )
    }

    pub fn pseudo_likelihood(self) -> bool {
        !matches!(self, ComparatorMethod::MleX | ComparatorMethod::NaiveMle)
    }

    pub fn empirical_variance(self) -> bool {
        matches!(
            self,
            ComparatorMethod::PlEmpiricalX | ComparatorMethod::NaivePlEmpirical
        )
    }
}

impl fmt::Display for ComparatorMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ComparatorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown comparator `{s}`")))
    }
}

/// Covariate adjustment of a comparison regression.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdjustmentSpec {
    pub main: Vec<String>,
    pub interactions: Vec<(String, String)>,
}

impl AdjustmentSpec {
    pub fn main_effects(names: &[&str]) -> Self {
        Self {
            main: names.iter().map(|s| s.to_string()).collect(),
            interactions: Vec::new(),
        }
    }

    pub fn with_interaction(mut self, a: &str, b: &str) -> Self {
        self.interactions.push((a.to_string(), b.to_string()));
        self
    }
}

/// Phase-two stratum label of every dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    pub labels: Vec<usize>,
}

impl Strata {
    /// One stratum per distinct combination of the named covariates.
    pub fn from_columns(ds: &Dataset, names: &[&str]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| ds.schema().index_of(n))
            .collect::<Result<Vec<_>>>()?;
        let mut keys: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let raw: Vec<Vec<u64>> = ds
            .rows()
            .iter()
            .map(|r| cols.iter().map(|&j| r.x[j].to_bits()).collect())
            .collect();
        for k in &raw {
            let next = keys.len();
            keys.entry(k.clone()).or_insert(next);
        }
        // relabel in sorted key order for determinism
        let order: BTreeMap<&Vec<u64>, usize> =
            keys.keys().enumerate().map(|(i, k)| (k, i)).collect();
        Ok(Self {
            labels: raw.iter().map(|k| order[k]).collect(),
        })
    }

    /// Every row in one stratum.
    pub fn single(n: usize) -> Self {
        Self { labels: vec![0; n] }
    }

    pub fn count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Phase-one and phase-two counts per (case status, stratum) and the
/// resulting log sampling-fraction ratio per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingOffsets {
    /// `phase_one[y][s]`
    pub phase_one: [Vec<usize>; 2],
    /// `phase_two[y][s]`
    pub phase_two: [Vec<usize>; 2],
    /// `None` for strata without phase-two rows.
    pub offset: Vec<Option<f64>>,
}

impl SamplingOffsets {
    pub fn compute(ds: &Dataset, strata: &Strata) -> Result<Self> {
        if strata.labels.len() != ds.n() {
            return Err(Error::Config("stratum labels must cover every row".into()));
        }
        let k = strata.count();
        let mut phase_one = [vec![0usize; k], vec![0usize; k]];
        let mut phase_two = [vec![0usize; k], vec![0usize; k]];
        for (row, &s) in ds.rows().iter().zip(&strata.labels) {
            phase_one[row.y as usize][s] += 1;
            if row.delta() {
                phase_two[row.y as usize][s] += 1;
            }
        }
        let mut offset = Vec::with_capacity(k);
        for s in 0..k {
            if phase_two[0][s] + phase_two[1][s] == 0 {
                offset.push(None);
                continue;
            }
            for y in 0..2 {
                if phase_two[y][s] == 0 {
                    return Err(Error::InvalidData(format!(
                        "stratum {s} has phase-two rows but none with y={y}; sampling fraction is zero"
                    )));
                }
            }
            let frac = |y: usize| phase_two[y][s] as f64 / phase_one[y][s] as f64;
            offset.push(Some(frac(1).ln() - frac(0).ln()));
        }
        Ok(Self {
            phase_one,
            phase_two,
            offset,
        })
    }
}

/// A fitted comparison regression; PL model/empirical variants share it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorFit {
    pub coefficients: Vec<f64>,
    pub column_names: Vec<String>,
    pub cov_model: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub converged: bool,
    pub n_used: usize,
}

impl ComparatorFit {
    /// Exposure coefficient.
    pub fn exposure_coef(&self) -> f64 {
        self.coefficients[1]
    }

    pub fn se_model(&self) -> f64 {
        self.cov_model[(1, 1)].max(0.0).sqrt()
    }

    pub fn se_empirical(&self) -> f64 {
        self.cov_sandwich[(1, 1)].max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparatorResult {
    pub method: ComparatorMethod,
    /// Exposure log odds ratio.
    pub coef: f64,
    pub se_model: f64,
    pub se_empirical: f64,
    pub converged: bool,
}

impl ComparatorResult {
    pub fn from_fit(method: ComparatorMethod, fit: &ComparatorFit) -> Self {
        Self {
            method,
            coef: fit.exposure_coef(),
            se_model: fit.se_model(),
            se_empirical: fit.se_empirical(),
            converged: fit.converged,
        }
    }

    /// The standard error this method reports.
    pub fn se(&self) -> f64 {
        if self.method.empirical_variance() {
            self.se_empirical
        } else {
            self.se_model
        }
    }
}

fn regression(ds: &Dataset, spec: &AdjustmentSpec, offsets: Option<&[f64]>) -> Result<ComparatorFit> {
    let schema = ds.schema();
    let main = spec
        .main
        .iter()
        .map(|n| schema.index_of(n))
        .collect::<Result<Vec<_>>>()?;
    let inter = spec
        .interactions
        .iter()
        .map(|(a, b)| Ok((schema.index_of(a)?, schema.index_of(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<usize> = ds.observed_rows().map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::InvalidData("no rows with observed exposure".into()));
    }
    let p = 2 + main.len() + inter.len();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n);
    for (r, &i) in rows.iter().enumerate() {
        let row = &ds.rows()[i];
        x[(r, 0)] = 1.0;
        x[(r, 1)] = row.delta_a();
        for (k, &j) in main.iter().enumerate() {
            x[(r, 2 + k)] = row.x[j];
        }
        for (k, &(a, b)) in inter.iter().enumerate() {
            x[(r, 2 + main.len() + k)] = row.x[a] * row.x[b];
        }
        y.push(row.y_f64());
        off.push(offsets.map_or(0.0, |o| o[i]));
    }
    let fit = fit_logistic(&y, &x, &off, &vec![1.0; n], &IrlsOptions::default())?;
    let cov_model = fit.covariance()?;

    let eta = crate::solvers::linear_predictor(&x, &fit.coefficients, &off);
    let sq_resid: Vec<f64> = eta
        .iter()
        .zip(&y)
        .map(|(&e, &yi)| (yi - mean_from_logit(e)).powi(2))
        .collect();
    let meat = weighted_gram(&x, &sq_resid);
    let cov_sandwich = &cov_model * meat * &cov_model;

    let mut names = vec!["(intercept)".to_string(), "a".to_string()];
    names.extend(spec.main.iter().cloned());
    names.extend(spec.interactions.iter().map(|(a, b)| format!("{a}:{b}")));
    Ok(ComparatorFit {
        coefficients: fit.coefficients,
        column_names: names,
        cov_model,
        cov_sandwich,
        converged: fit.converged,
        n_used: n,
    })
}

/// Ordinary logistic regression of `Y` on `A` and covariates among `Δ = 1` rows.
pub fn fit_ordinary_mle(ds: &Dataset, spec: &AdjustmentSpec) -> Result<ComparatorFit> {
    regression(ds, spec, None)
}

/// Offset (pseudo-likelihood) logistic regression among `Δ = 1` rows.
pub fn fit_pseudo_likelihood(
    ds: &Dataset,
    spec: &AdjustmentSpec,
    strata: &Strata,
) -> Result<ComparatorFit> {
    let offsets = SamplingOffsets::compute(ds, strata)?;
    let per_row: Vec<f64> = strata
        .labels
        .iter()
        .map(|&s| offsets.offset[s].unwrap_or(0.0))
        .collect();
    regression(ds, spec, Some(&per_row))
}

/// Runs the requested comparators, sharing fits between the PL model and
/// empirical variants.
pub fn run_comparators(
    ds: &Dataset,
    methods: &[ComparatorMethod],
    full_spec: &AdjustmentSpec,
    naive_spec: &AdjustmentSpec,
    strata: &Strata,
) -> Vec<(ComparatorMethod, Result<ComparatorResult>)> {
    let mut cache: BTreeMap<(bool, bool), std::result::Result<ComparatorFit, String>> = BTreeMap::new();
    methods
        .iter()
        .map(|&m| {
            let key = (m.with_interaction(), m.pseudo_likelihood());
            let fit = cache.entry(key).or_insert_with(|| {
                let spec = if key.0 { full_spec } else { naive_spec };
                let fit = if key.1 {
                    fit_pseudo_likelihood(ds, spec, strata)
                } else {
                    fit_ordinary_mle(ds, spec)
                };
                fit.map_err(|e| e.to_string())
            });
            let res = match fit {
                Ok(f) => Ok(ComparatorResult::from_fit(m, f)),
                Err(msg) => Err(Error::InvalidData(format!("{m}: {msg}"))),
            };
            (m, res)
        })
        .collect()
}
