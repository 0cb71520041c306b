//! Effect design `f(x)` (the log-OR modifiers) and the hinge/product basis
//! used for the flexible nuisance functions.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, Dataset, Schema};
use crate::error::{Error, Result};

/// One coordinate of the effect design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Covariate(String),
    Product(String, String),
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Config("empty term".into()));
        }
        if s == "1" || s.eq_ignore_ascii_case("intercept") {
            return Ok(Term::Intercept);
        }
        if let Some((a, b)) = s.split_once([':', '*']) {
            let (a, b) = (a.trim(), b.trim());
            if a.is_empty() || b.is_empty() {
                return Err(Error::Config(format!("malformed product term `{s}`")));
            }
            return Ok(Term::Product(a.to_string(), b.to_string()));
        }
        Ok(Term::Covariate(s.to_string()))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "intercept"),
            Term::Covariate(c) => write!(f, "{c}"),
            Term::Product(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResolvedTerm {
    Intercept,
    Covariate(usize),
    Product(usize, usize),
}

/// The known vector function `f` with `log OR(x) = betaᵀ f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDesign {
    terms: Vec<Term>,
    resolved: Vec<ResolvedTerm>,
}

impl EffectDesign {
    pub fn intercept_only() -> Self {
        Self {
            terms: vec![Term::Intercept],
            resolved: vec![ResolvedTerm::Intercept],
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Output dimension `b`.
    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.resolved) {
            *o = match *t {
                ResolvedTerm::Intercept => 1.0,
                ResolvedTerm::Covariate(j) => x[j],
                ResolvedTerm::Product(j, k) => x[j] * x[k],
            };
        }
    }

    /// `n × b` matrix of `f(x_i)` over all rows.
    pub fn matrix(&self, ds: &Dataset) -> DMatrix<f64> {
        let b = self.dim();
        let mut m = DMatrix::zeros(ds.n(), b);
        let mut buf = vec![0.0; b];
        for (i, row) in ds.rows().iter().enumerate() {
            self.eval_into(&row.x, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                m[(i, k)] = *v;
            }
        }
        m
    }
}

/// Resolves a term list against a schema.
pub fn build_effect_design(terms: &[Term], schema: &Schema) -> Result<EffectDesign> {
    if terms.is_empty() {
        return Err(Error::Config("effect design needs at least one term".into()));
    }
    let resolved = terms
        .iter()
        .map(|t| {
            Ok(match t {
                Term::Intercept => ResolvedTerm::Intercept,
                Term::Covariate(c) => ResolvedTerm::Covariate(schema.index_of(c)?),
                Term::Product(a, b) => {
                    ResolvedTerm::Product(schema.index_of(a)?, schema.index_of(b)?)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectDesign {
        terms: terms.to_vec(),
        resolved,
    })
}

/// Richness of the nuisance basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisConfig {
    /// Hinge knots per continuous covariate, at equally spaced quantiles.
    pub knots: usize,
    /// 1 = main effects and hinges; 2 additionally adds pairwise products
    /// of the main-effect columns.
    pub degree: u8,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            knots: 10,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisColumn {
    Main(usize),
    Product(usize, usize),
    /// `max(0, z_j - knot)` on the standardized covariate.
    Hinge { covariate: usize, knot: f64 },
}

/// Deterministic basis over the covariates. Continuous covariates are
/// standardized with the centre/scale of the dataset used to build the
/// basis; evaluation always takes raw covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBasis {
    config: BasisConfig,
    center: Vec<f64>,
    scale: Vec<f64>,
    columns: Vec<BasisColumn>,
    names: Vec<String>,
}

impl NuisanceBasis {
    pub fn config(&self) -> BasisConfig {
        self.config
    }

    pub fn columns(&self) -> &[BasisColumn] {
        &self.columns
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    /// Number of columns `p`.
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Knots of a covariate on the raw scale.
    pub fn raw_knots(&self, covariate: usize) -> Vec<f64> {
        self.columns
            .iter()
            .filter_map(|c| match *c {
                BasisColumn::Hinge { covariate: j, knot } if j == covariate => {
                    Some(knot * self.scale[j] + self.center[j])
                }
                _ => None,
            })
            .collect()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let z = |j: usize| (x[j] - self.center[j]) / self.scale[j];
        for (o, col) in out.iter_mut().zip(&self.columns) {
            *o = match *col {
                BasisColumn::Main(j) => z(j),
                BasisColumn::Product(j, k) => z(j) * z(k),
                BasisColumn::Hinge { covariate, knot } => (z(covariate) - knot).max(0.0),
            };
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// Basis matrix for the given rows of a dataset.
    pub fn matrix(&self, ds: &Dataset, rows: &[usize]) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(rows.len(), p);
        let mut buf = vec![0.0; p];
        for (r, &i) in rows.iter().enumerate() {
            self.eval_into(&ds.rows()[i].x, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                m[(r, k)] = *v;
            }
        }
        m
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn build_nuisance_basis(ds: &Dataset, config: BasisConfig) -> Result<NuisanceBasis> {
    if !(1..=2).contains(&config.degree) {
        return Err(Error::Config(format!(
            "basis degree must be 1 or 2, got {}",
            config.degree
        )));
    }
    let schema = ds.schema();
    let r = schema.len();
    let mut center = vec![0.0; r];
    let mut scale = vec![1.0; r];
    let mut columns: Vec<BasisColumn> = (0..r).map(BasisColumn::Main).collect();
    let mut names: Vec<String> = schema.names().map(str::to_string).collect();

    if config.degree == 2 {
        for j in 0..r {
            for k in (j + 1)..r {
                columns.push(BasisColumn::Product(j, k));
                names.push(format!("{}:{}", schema.covariates[j].name, schema.covariates[k].name));
            }
        }
    }

    for (j, cov) in schema.covariates.iter().enumerate() {
        if cov.kind != CovariateKind::Continuous {
            continue;
        }
        let mut values: Vec<f64> = ds.rows().iter().map(|row| row.x[j]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        center[j] = mean;
        if sd > 0.0 && sd.is_finite() {
            scale[j] = sd;
        }
        if config.knots == 0 {
            continue;
        }
        values.sort_by(f64::total_cmp);
        let min = values[0];
        let max = values[values.len() - 1];
        if min == max {
            return Err(Error::InvalidData(format!(
                "covariate `{}` has fewer than 2 distinct values; cannot place knots",
                cov.name
            )));
        }
        let mut last = f64::NEG_INFINITY;
        for q in 1..=config.knots {
            let knot = quantile_sorted(&values, q as f64 / (config.knots + 1) as f64);
            // a knot at the maximum gives an all-zero column
            if knot <= last || knot >= max {
                continue;
            }
            last = knot;
            columns.push(BasisColumn::Hinge {
                covariate: j,
                knot: (knot - center[j]) / scale[j],
            });
            names.push(format!("({} - {knot:.4})+", cov.name));
        }
    }

    Ok(NuisanceBasis {
        config,
        center,
        scale,
        columns,
        names,
    })
}
