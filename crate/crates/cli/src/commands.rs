use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use serde::Serialize;
use tnd_tmle::comparators::{run_comparators, AdjustmentSpec, ComparatorMethod, Strata};
use tnd_tmle::data::{infer_schema, load_dataset, validate, CovariateKind, Dataset, ValidationReport};
use tnd_tmle::design::{build_effect_design, build_nuisance_basis, BasisConfig, EffectDesign, Term};
use tnd_tmle::simulation::{run_monte_carlo, MetricsRow, MetricsTable};
use tnd_tmle::solvers::LassoOptions;
use tnd_tmle::tmle::{
    fit_initial, linear_contrast, or_at_x, tmle_update, InitialOptions, OrEstimate, TargetedEstimate,
    TargetingOptions,
};

use crate::config::RunConfig;
use crate::{Failure, Mode, Outcome};

/// Default contrasts list every distinct effect vector up to this many.
const MAX_DEFAULT_CONTRASTS: usize = 16;

#[derive(Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
}

impl Header {
    fn new(mode: Mode, cfg: &RunConfig) -> Self {
        Self {
            tool: "tnd-tmle",
            version: env!("CARGO_PKG_VERSION"),
            command: mode.label(),
            seed: cfg.seed,
            config: cfg.for_mode(mode),
        }
    }

    /// Single-line `#` comment carrying the resolved config into CSV outputs.
    fn csv_comment(&self) -> Outcome<String> {
        let json = serde_json::to_string(self).map_err(Failure::data)?;
        Ok(format!("# {json}\n"))
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Failure::data)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_commented_csv(path: &Path, header: &Header, body: &[u8]) -> Outcome<()> {
    let mut w = create(path)?;
    w.write_all(header.csv_comment()?.as_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ContrastRow {
    fx: Vec<f64>,
    #[serde(flatten)]
    estimate: OrEstimate,
}

#[derive(Serialize)]
struct TmleReport {
    terms: Vec<String>,
    basis_columns: usize,
    beta: Vec<f64>,
    se: Vec<f64>,
    beta_init: Vec<f64>,
    cov: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    tol: f64,
    max_abs_mean_eif: f64,
    condition_number: f64,
    contrasts: Vec<ContrastRow>,
}

#[derive(Serialize)]
struct ComparatorRow {
    method: String,
    converged: bool,
    error: Option<String>,
    #[serde(flatten)]
    estimate: Option<OrEstimate>,
}

#[derive(Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    header: Header,
    data: ValidationReport,
    tmle: TmleReport,
    comparators: Vec<ComparatorRow>,
}

/// Distinct effect vectors over the phase-one rows, or unit vectors when
/// there are too many to list.
fn default_contrasts(ds: &Dataset, design: &EffectDesign) -> Vec<Vec<f64>> {
    let mut seen: Vec<Vec<f64>> = Vec::new();
    for row in ds.rows() {
        let fx = design.eval(&row.x);
        if !seen.contains(&fx) {
            seen.push(fx);
            if seen.len() > MAX_DEFAULT_CONTRASTS {
                let b = design.dim();
                return (0..b).map(|k| (0..b).map(|j| f64::from(u8::from(j == k))).collect()).collect();
            }
        }
    }
    seen.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    seen
}

fn tmle_report(te: &TargetedEstimate, design: &EffectDesign, basis_columns: usize, contrasts: &[Vec<f64>], level: f64) -> TmleReport {
    let b = te.beta.len();
    TmleReport {
        terms: design.terms().iter().map(Term::to_string).collect(),
        basis_columns,
        beta: te.beta.clone(),
        se: te.standard_errors(),
        beta_init: te.beta_init.clone(),
        cov: (0..b).map(|i| (0..b).map(|j| te.cov[(i, j)]).collect()).collect(),
        iterations: te.iterations,
        converged: te.converged,
        tol: te.tol,
        max_abs_mean_eif: te.mean_eif.iter().fold(0.0, |m, v| m.max(v.abs())),
        condition_number: te.condition_number,
        contrasts: contrasts
            .iter()
            .map(|fx| ContrastRow {
                fx: fx.clone(),
                estimate: or_at_x(te, fx, level),
            })
            .collect(),
    }
}

fn comparator_rows(ds: &Dataset, cfg: &RunConfig) -> Outcome<Vec<ComparatorRow>> {
    let est = &cfg.estimate;
    if est.comparators.is_empty() {
        return Ok(Vec::new());
    }
    let methods: Vec<ComparatorMethod> = est
        .comparators
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, tnd_tmle::Error>>()?;
    let schema = ds.schema();
    let adjust: Vec<&str> = if est.adjust.is_empty() {
        schema.names().collect()
    } else {
        est.adjust.iter().map(String::as_str).collect()
    };
    let naive = AdjustmentSpec::main_effects(&adjust);
    let full = est
        .interactions
        .iter()
        .fold(naive.clone(), |s, (a, b)| s.with_interaction(a, b));
    let strata_cols: Vec<&str> = if est.strata.is_empty() {
        schema
            .covariates
            .iter()
            .filter(|c| c.kind == CovariateKind::Binary)
            .map(|c| c.name.as_str())
            .collect()
    } else {
        est.strata.iter().map(String::as_str).collect()
    };
    let strata = if strata_cols.is_empty() {
        Strata::single(ds.n())
    } else {
        Strata::from_columns(ds, &strata_cols)?
    };
    let mut rows = Vec::new();
    for (m, res) in run_comparators(ds, &methods, &full, &naive, &strata) {
        rows.push(match res {
            Ok(r) => {
                let cov = DMatrix::from_element(1, 1, r.se() * r.se());
                ComparatorRow {
                    method: m.to_string(),
                    converged: r.converged,
                    error: None,
                    estimate: Some(linear_contrast(&[r.coef], &cov, &[1.0], cfg.ci_level)),
                }
            }
            Err(e) => ComparatorRow {
                method: m.to_string(),
                converged: false,
                error: Some(e.to_string()),
                estimate: None,
            },
        });
    }
    Ok(rows)
}

fn comparator_csv(rows: &[ComparatorRow]) -> Outcome<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::data(e);
    w.write_record(["method", "converged", "log_or", "se", "ci_low", "ci_high", "or", "or_ci_low", "or_ci_high", "error"])
        .map_err(csv_err)?;
    for r in rows {
        let nums = match &r.estimate {
            Some(e) => [e.log_or, e.se, e.ci_low, e.ci_high, e.or, e.or_ci_low, e.or_ci_high].map(|v| v.to_string()),
            None => Default::default(),
        };
        let mut rec = vec![r.method.clone(), r.converged.to_string()];
        rec.extend(nums);
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Failure::data(e.error()))
}

pub fn estimate(cfg: &RunConfig) -> Outcome<()> {
    let est = &cfg.estimate;
    let input = est.input.as_ref().expect("checked during resolution");
    let schema = infer_schema(input)?;
    let ds = load_dataset(input, &schema)?;
    let data = validate(&ds);
    if !data.passed() {
        return Err(Failure::data(format!("{} failed validation\n{data}", input.display())));
    }
    let terms: Vec<Term> = est.effect.iter().map(|t| t.parse()).collect::<Result<_, tnd_tmle::Error>>()?;
    let design = build_effect_design(&terms, ds.schema())?;
    let basis = build_nuisance_basis(
        &ds,
        BasisConfig {
            knots: est.knots,
            degree: est.degree,
        },
    )?;
    let seed = cfg.seed.unwrap_or(0);
    let opts = InitialOptions {
        lasso: LassoOptions {
            folds: est.cv_folds,
            n_lambda: est.n_lambda,
            seed,
            ..LassoOptions::default()
        },
        cross_fit: est.cross_fit,
        seed,
    };
    let t = Instant::now();
    let nf = fit_initial(&ds, &design, &basis, &opts)?;
    let te = tmle_update(&nf, &ds, &design, &TargetingOptions::default())?;
    info!(
        "targeting finished in {} iterations ({:.2}s, converged: {})",
        te.iterations,
        t.elapsed().as_secs_f64(),
        te.converged
    );

    for fx in &est.contrasts {
        if fx.len() != design.dim() {
            return Err(Failure::usage(format!(
                "contrast {fx:?} has length {}, effect design has {} terms",
                fx.len(),
                design.dim()
            )));
        }
    }
    let contrasts = if est.contrasts.is_empty() {
        default_contrasts(&ds, &design)
    } else {
        est.contrasts.clone()
    };
    let header = Header::new(Mode::Estimate, cfg);
    let comparators = comparator_rows(&ds, cfg)?;
    let report = EstimateReport {
        tmle: tmle_report(&te, &design, basis.dim(), &contrasts, cfg.ci_level),
        header,
        data,
        comparators,
    };

    let path = cfg.out.join("report.json");
    write_json(&path, &report)?;
    println!("wrote {}", path.display());
    if !report.comparators.is_empty() {
        let path = cfg.out.join("comparators.csv");
        write_commented_csv(&path, &report.header, &comparator_csv(&report.comparators)?)?;
        println!("wrote {}", path.display());
    }
    for c in &report.tmle.contrasts {
        let e = &c.estimate;
        println!(
            "TMLE f(x) = {:?}: log OR {:.4} (SE {:.4}), OR {:.3} [{:.3}, {:.3}], VE {:.1}% [{:.1}, {:.1}]",
            c.fx, e.log_or, e.se, e.or, e.or_ci_low, e.or_ci_high, e.ve_percent, e.ve_ci_low, e.ve_ci_high
        );
    }
    for r in &report.comparators {
        match (&r.estimate, &r.error) {
            (Some(e), _) => println!("{}: log OR {:.4} (SE {:.4}), OR {:.3} [{:.3}, {:.3}]", r.method, e.log_or, e.se, e.or, e.or_ci_low, e.or_ci_high),
            (None, Some(err)) => println!("{}: failed: {err}", r.method),
            (None, None) => {}
        }
    }
    if !te.converged {
        return Err(Failure::estimation(format!(
            "targeting did not converge in {} iterations: max |mean EIF| {:.3e} above tolerance {:.3e} (report written)",
            te.iterations, report.tmle.max_abs_mean_eif, te.tol
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Tolerances {
    targeting: TargetingOptions,
    targeting_tol_rule: &'static str,
    lasso_kkt_tol: f64,
    lasso_lambda_min_ratio: f64,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    #[serde(flatten)]
    header: Header,
    tolerances: Tolerances,
    scenarios: usize,
    metrics: &'a [MetricsRow],
}

pub fn simulate(cfg: &RunConfig) -> Outcome<()> {
    let sim = &cfg.simulate;
    let scenarios = if !sim.full_grid {
        vec![sim.scenario.clone()]
    } else if sim.sizes.is_empty() {
        sim.scenario.full_grid()
    } else {
        sim.scenario.grid(&sim.sizes)
    };
    let mut table = MetricsTable::default();
    for (i, sc) in scenarios.iter().enumerate() {
        let t = Instant::now();
        let res = run_monte_carlo(sc)?;
        let failed: usize = res.metrics.rows.iter().map(|r| r.failed_reps).sum();
        info!(
            "scenario {}/{}: {} {} n={} beta_f={:.4} reps={} failed fits={} ({:.1}s)",
            i + 1,
            scenarios.len(),
            sc.setting,
            sc.design,
            sc.n,
            sc.beta_f,
            sc.reps,
            failed,
            t.elapsed().as_secs_f64()
        );
        table.rows.extend(res.metrics.rows);
    }

    let header = Header::new(Mode::Simulate, cfg);
    let mut body = Vec::new();
    table.write_csv(&mut body)?;
    let csv_path = cfg.out.join("metrics.csv");
    write_commented_csv(&csv_path, &header, &body)?;
    let lasso = LassoOptions::default();
    let report = SimulateReport {
        header,
        tolerances: Tolerances {
            targeting: TargetingOptions::default(),
            targeting_tol_rule: "max(1e-8, min SE / (sqrt(n) ln n))",
            lasso_kkt_tol: lasso.tol,
            lasso_lambda_min_ratio: lasso.lambda_min_ratio,
        },
        scenarios: scenarios.len(),
        metrics: &table.rows,
    };
    let json_path = cfg.out.join("metrics.json");
    write_json(&json_path, &report)?;
    println!("wrote {} and {} ({} rows)", csv_path.display(), json_path.display(), table.rows.len());
    Ok(())
}

/// Reads a metrics CSV, skipping `#` comment lines.
fn read_metrics(path: &Path) -> Outcome<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).flat_map(|l| [l, "\n"]).collect();
    MetricsTable::read_csv(body.as_bytes())
        .map_err(|e| Failure::data(format!("{} is not a metrics table: {e}", path.display())))
}

pub fn summarize(cfg: &RunConfig) -> Outcome<()> {
    let mut merged = MetricsTable::default();
    let mut owner: BTreeMap<String, &PathBuf> = BTreeMap::new();
    let mut collisions = Vec::new();
    for path in &cfg.summarize.inputs {
        for row in read_metrics(path)?.rows {
            let key = row.key();
            match owner.get(&key) {
                Some(first) => collisions.push(format!("{key} ({} and {})", first.display(), path.display())),
                None => {
                    owner.insert(key, path);
                    merged.rows.push(row);
                }
            }
        }
    }
    if !collisions.is_empty() {
        return Err(Failure::data(format!(
            "duplicate scenario keys:\n  {}",
            collisions.join("\n  ")
        )));
    }
    let header = Header::new(Mode::Summarize, cfg);
    let mut body = Vec::new();
    merged.write_csv(&mut body)?;
    let path = cfg.out.join("summary.csv");
    write_commented_csv(&path, &header, &body)?;
    println!("wrote {} ({} rows from {} files)", path.display(), merged.rows.len(), cfg.summarize.inputs.len());
    Ok(())
}
