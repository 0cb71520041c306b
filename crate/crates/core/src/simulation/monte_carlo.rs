use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_two_phase, generate_population, sample_phase_one, ConfoundingSetting, Estimator,
    SamplingDesign, SimConfig,
};
use crate::comparators::{run_comparators, AdjustmentSpec, ComparatorMethod, Strata};
use crate::data::Dataset;
use crate::design::{build_nuisance_basis, BasisConfig, EffectDesign};
use crate::error::{Error, Result};
use crate::solvers::LassoOptions;
use crate::tmle::{
    fit_initial, normal_critical, tmle_update, InitialOptions, TargetedEstimate, TargetingOptions,
};

/// Significance level of the test of no effect.
const TEST_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    /// Estimated log odds ratio, absent when the fit failed.
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    pub tmle: Option<TmleDiagnostics>,
}

/// Targeting diagnostics of a TMLE fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmleDiagnostics {
    pub beta_init: f64,
    pub iterations: usize,
    pub tol: f64,
    pub max_abs_mean_eif: f64,
    /// Largest model-constraint violation over all targeting steps.
    pub max_constraint_gap: f64,
}

impl EstimateRecord {
    fn failed(estimator: Estimator, msg: impl Into<String>) -> Self {
        Self {
            estimator,
            estimate: None,
            se: None,
            converged: false,
            error: Some(msg.into()),
            tmle: None,
        }
    }

    fn usable(&self) -> Option<(f64, f64)> {
        match (self.estimate, self.se) {
            (Some(e), Some(s)) if e.is_finite() && s.is_finite() => Some((e, s)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    /// Fraction of phase-one participants who are cases.
    pub case_fraction: Option<f64>,
    pub n_phase_two: Option<usize>,
    pub estimates: Vec<EstimateRecord>,
}

/// Performance of one estimator in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: Estimator,
    pub setting: ConfoundingSetting,
    pub design: SamplingDesign,
    pub n: usize,
    pub beta_f: f64,
    pub reps: usize,
    pub failed_reps: usize,
    pub bias: f64,
    pub coverage: f64,
    /// `type1` when the true effect is null, otherwise `power`.
    pub rejection_kind: String,
    pub type1_or_power: f64,
    pub mcsd: f64,
    pub mean_se: f64,
    pub mean_case_fraction: f64,
    /// Distribution used for the calendar covariate.
    pub x_t_source: String,
}

impl MetricsRow {
    /// Identifies the scenario and estimator; unique within a table.
    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}/{}/{:.6}",
            self.estimator, self.setting, self.design, self.n, self.beta_f
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, estimator: Estimator) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(csv_error)?;
        Ok(Self { rows })
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        column: String::new(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub config: SimConfig,
    pub metrics: MetricsTable,
    pub replicates: Vec<ReplicateOutcome>,
}

fn replicate_rng(cfg: &SimConfig, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    rng
}

/// Generates, samples and analyses replicate `rep`. Its randomness depends
/// only on `(cfg.seed, rep)`.
pub fn run_replicate(cfg: &SimConfig, rep: usize) -> ReplicateOutcome {
    let mut rng = replicate_rng(cfg, rep);
    let fail_all = |msg: String, case_fraction| ReplicateOutcome {
        rep,
        case_fraction,
        n_phase_two: None,
        estimates: cfg
            .estimators
            .iter()
            .map(|&e| EstimateRecord::failed(e, msg.clone()))
            .collect(),
    };

    let pop = generate_population(cfg, &mut rng);
    let phase_one = match sample_phase_one(&pop, cfg.n, &mut rng) {
        Ok(ds) => ds,
        Err(e) => return fail_all(e.to_string(), None),
    };
    let cases = phase_one.rows().iter().filter(|r| r.y).count();
    let case_fraction = Some(cases as f64 / phase_one.n() as f64);
    let ds = match apply_two_phase(&phase_one, cfg.design, &mut rng) {
        Ok(ds) => ds,
        Err(e) => return fail_all(e.to_string(), case_fraction),
    };
    let learner_seed: u64 = rng.random();

    let mut estimates = Vec::with_capacity(cfg.estimators.len());
    if cfg.estimators.contains(&Estimator::Tmle) {
        estimates.push(run_tmle(cfg, &ds, learner_seed));
    }
    let methods: Vec<ComparatorMethod> = cfg
        .estimators
        .iter()
        .filter_map(|e| match e {
            Estimator::Comparator(m) => Some(*m),
            Estimator::Tmle => None,
        })
        .collect();
    if !methods.is_empty() {
        estimates.extend(run_simulation_comparators(&ds, &methods));
    }
    // report in configured order
    estimates.sort_by_key(|r| cfg.estimators.iter().position(|e| *e == r.estimator));
    ReplicateOutcome {
        rep,
        case_fraction,
        n_phase_two: Some(ds.n_observed()),
        estimates,
    }
}

fn run_tmle(cfg: &SimConfig, ds: &Dataset, seed: u64) -> EstimateRecord {
    let fit = || -> Result<TargetedEstimate> {
        let basis = build_nuisance_basis(
            ds,
            BasisConfig {
                knots: cfg.learner.knots,
                degree: cfg.learner.degree,
            },
        )?;
        let design = EffectDesign::intercept_only();
        let opts = InitialOptions {
            lasso: LassoOptions {
                folds: cfg.learner.cv_folds,
                n_lambda: cfg.learner.n_lambda,
                seed,
                ..LassoOptions::default()
            },
            cross_fit: cfg.learner.cross_fit,
            seed,
        };
        let nf = fit_initial(ds, &design, &basis, &opts)?;
        tmle_update(&nf, ds, &design, &TargetingOptions::default())
    };
    match fit() {
        Ok(te) => EstimateRecord {
            estimator: Estimator::Tmle,
            estimate: Some(te.beta[0]),
            se: Some(te.cov[(0, 0)].max(0.0).sqrt()),
            converged: te.converged,
            error: None,
            tmle: Some(TmleDiagnostics {
                beta_init: te.beta_init[0],
                iterations: te.iterations,
                tol: te.tol,
                max_abs_mean_eif: te.mean_eif.iter().fold(0.0, |m, v| m.max(v.abs())),
                max_constraint_gap: te.constraint_trace.iter().cloned().fold(0.0, f64::max),
            }),
        },
        Err(e) => EstimateRecord::failed(Estimator::Tmle, e.to_string()),
    }
}

fn run_simulation_comparators(ds: &Dataset, methods: &[ComparatorMethod]) -> Vec<EstimateRecord> {
    let naive = AdjustmentSpec::main_effects(&["x_f", "x_co", "x_t"]);
    let full = naive.clone().with_interaction("x_f", "x_co");
    let strata = match Strata::from_columns(ds, &["x_f", "x_co"]) {
        Ok(s) => s,
        Err(e) => {
            return methods
                .iter()
                .map(|&m| EstimateRecord::failed(Estimator::Comparator(m), e.to_string()))
                .collect()
        }
    };
    run_comparators(ds, methods, &full, &naive, &strata)
        .into_iter()
        .map(|(m, res)| match res {
            Ok(r) => EstimateRecord {
                estimator: Estimator::Comparator(m),
                estimate: Some(r.coef),
                se: Some(r.se()),
                converged: r.converged,
                error: None,
                tmle: None,
            },
            Err(e) => EstimateRecord::failed(Estimator::Comparator(m), e.to_string()),
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn summarize(cfg: &SimConfig, outcomes: &[ReplicateOutcome]) -> MetricsTable {
    let z_ci = normal_critical(cfg.level);
    let z_test = normal_critical(1.0 - TEST_LEVEL);
    let case_fractions: Vec<f64> = outcomes.iter().filter_map(|o| o.case_fraction).collect();
    let mean_case_fraction = mean(&case_fractions);
    let c = &cfg.calendar;
    let x_t_source = format!(
        "surrogate normal(mean={}, sd={}) truncated to [{}, {}]",
        c.mean, c.sd, c.lower, c.upper
    );
    let rows = cfg
        .estimators
        .iter()
        .map(|&estimator| {
            let fits: Vec<(f64, f64)> = outcomes
                .iter()
                .filter_map(|o| o.estimates.iter().find(|r| r.estimator == estimator))
                .filter_map(EstimateRecord::usable)
                .collect();
            let k = fits.len() as f64;
            let est: Vec<f64> = fits.iter().map(|f| f.0).collect();
            let ses: Vec<f64> = fits.iter().map(|f| f.1).collect();
            let rate = |pred: &dyn Fn(&(f64, f64)) -> bool| {
                if fits.is_empty() {
                    f64::NAN
                } else {
                    fits.iter().filter(|f| pred(f)).count() as f64 / k
                }
            };
            MetricsRow {
                estimator,
                setting: cfg.setting,
                design: cfg.design,
                n: cfg.n,
                beta_f: cfg.beta_f,
                reps: cfg.reps,
                failed_reps: cfg.reps - fits.len(),
                bias: mean(&est) - cfg.beta_f,
                coverage: rate(&|&(e, s)| (e - cfg.beta_f).abs() <= z_ci * s),
                rejection_kind: if cfg.beta_f == 0.0 { "type1" } else { "power" }.into(),
                type1_or_power: rate(&|&(e, s)| e.abs() > z_test * s),
                mcsd: sample_sd(&est),
                mean_se: mean(&ses),
                mean_case_fraction,
                x_t_source: x_t_source.clone(),
            }
        })
        .collect();
    MetricsTable { rows }
}

/// Runs all replicates of one scenario in parallel and aggregates their
/// metrics in replicate order.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimulationResult> {
    cfg.validate()?;
    let replicates: Vec<ReplicateOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, rep))
        .collect();
    let metrics = summarize(cfg, &replicates);
    for row in &metrics.rows {
        log::info!(
            "{} {} {} n={} beta_f={:.4}: bias={:.4} coverage={:.3} {}={:.3} failed={}",
            row.estimator,
            row.setting,
            row.design,
            row.n,
            row.beta_f,
            row.bias,
            row.coverage,
            row.rejection_kind,
            row.type1_or_power,
            row.failed_reps
        );
    }
    Ok(SimulationResult {
        config: cfg.clone(),
        metrics,
        replicates,
    })
}
