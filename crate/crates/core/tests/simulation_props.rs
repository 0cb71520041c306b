use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnd_tmle::comparators::ComparatorMethod;
use tnd_tmle::data::{Dataset, Observation};
use tnd_tmle::simulation::*;
use tnd_tmle::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn exposure_cell_frequency_matches_model() {
    // centre the calendar covariate near the cell of interest so it is well populated
    let cfg = SimConfig {
        calendar: CalendarSurrogate {
            mean: 100.0,
            sd: 30.0,
            lower: 0.0,
            upper: 270.0,
        },
        ..SimConfig::default()
    };
    let pop = generate_population(&cfg, &mut rng(12));
    assert_eq!(pop.len(), 50_000);
    let cell: Vec<&PopulationRow> = pop
        .iter()
        .filter(|r| r.x_f && !r.x_co && (r.x_t - 100.0).abs() <= 1.0)
        .collect();
    assert!(cell.len() > 100);
    let expected = 1.0 / (1.0 + (-(0.33f64.ln() + 3.0f64.ln() + 100.0 * 1.01f64.ln())).exp());
    let observed = cell.iter().filter(|r| r.a).count() as f64 / cell.len() as f64;
    // exact probabilities over the ±1 day window, against the pointwise value
    let exact: f64 = cell
        .iter()
        .map(|r| prob_exposure(ConfoundingSetting::MainEffects, true, false, r.x_t))
        .sum::<f64>()
        / cell.len() as f64;
    assert!((exact - expected).abs() < 0.01);
    let se = (expected * (1.0 - expected) / cell.len() as f64).sqrt();
    assert!((observed - expected).abs() <= 3.0 * se, "observed {observed} expected {expected} se {se}");

    let female = pop.iter().filter(|r| r.x_f).count() as f64 / pop.len() as f64;
    let comorbid = pop.iter().filter(|r| r.x_co).count() as f64 / pop.len() as f64;
    assert!((female - P_FEMALE).abs() < 3.0 * (0.25f64 / 50_000.0).sqrt());
    assert!((comorbid - P_COMORBID).abs() < 3.0 * (0.23 * 0.77 / 50_000.0f64).sqrt());
}

#[test]
fn population_is_reproducible() {
    let cfg = SimConfig::default();
    assert_eq!(generate_population(&cfg, &mut rng(5)), generate_population(&cfg, &mut rng(5)));
    assert_ne!(generate_population(&cfg, &mut rng(5)), generate_population(&cfg, &mut rng(6)));
}

#[test]
fn phase_one_takes_symptomatic_rows_only() {
    let cfg = SimConfig {
        population_size: 5_000,
        ..SimConfig::default()
    };
    let pop = generate_population(&cfg, &mut rng(1));
    let symptomatic: Vec<PopulationRow> = pop.iter().copied().filter(|r| r.d).collect();
    let all = sample_phase_one(&pop, symptomatic.len(), &mut rng(2)).unwrap();
    assert_eq!(all, to_dataset(&symptomatic).unwrap());

    let part = sample_phase_one(&pop, 100, &mut rng(3)).unwrap();
    assert_eq!(part.n(), 100);
    for row in part.rows() {
        let found = symptomatic.iter().any(|r| {
            r.y == row.y && r.x_t == row.x[2] && f64::from(u8::from(r.x_f)) == row.x[0]
        });
        assert!(found);
    }
    assert!(matches!(
        sample_phase_one(&pop, symptomatic.len() + 1, &mut rng(4)),
        Err(Error::InfeasibleDesign(_))
    ));
}

#[test]
fn main_effects_case_fraction_in_reported_range() {
    let cfg = SimConfig::default();
    let mut total = 0.0;
    for rep in 0..50 {
        let mut r = rng(900 + rep);
        let pop = generate_population(&cfg, &mut r);
        let ds = sample_phase_one(&pop, 2000, &mut r).unwrap();
        total += ds.rows().iter().filter(|o| o.y).count() as f64 / 2000.0;
    }
    let mean = total / 50.0;
    assert!((0.04..=0.29).contains(&mean), "mean case fraction {mean}");
}

/// Phase-one fixture with `cases` cases and `noncases[k]` noncases in each
/// quota stratum.
fn stratified_fixture(cases: usize, noncases: [usize; 4]) -> Dataset {
    let levels = [(1.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let mut rows = Vec::new();
    for i in 0..cases {
        let (f, co) = levels[i % 4];
        rows.push(Observation::observed(i % 2 == 0, true, vec![f, co, 100.0 + i as f64]));
    }
    for (k, &m) in noncases.iter().enumerate() {
        let (f, co) = levels[k];
        for i in 0..m {
            rows.push(Observation::observed(i % 3 == 0, false, vec![f, co, 50.0 + i as f64]));
        }
    }
    Dataset::new(simulation_schema(), rows).unwrap()
}

fn sampled_by_stratum(ds: &Dataset) -> [usize; 4] {
    let mut out = [0; 4];
    for r in ds.rows().iter().filter(|r| !r.y && r.delta()) {
        out[noncase_stratum(r.x[0] == 1.0, r.x[1] == 1.0)] += 1;
    }
    out
}

#[test]
fn all_design_observes_everyone() {
    let ds = stratified_fixture(40, [50, 50, 50, 50]);
    let out = apply_two_phase(&ds, SamplingDesign::All, &mut rng(0)).unwrap();
    assert!(out.rows().iter().all(|r| r.delta()));
}

#[test]
fn one_to_one_with_ample_noncases() {
    let ds = stratified_fixture(60, [100, 100, 100, 100]);
    let out = apply_two_phase(&ds, SamplingDesign::Biased1To1, &mut rng(0)).unwrap();
    let cases = out.rows().iter().filter(|r| r.y && r.delta()).count();
    assert_eq!(cases, 60);
    assert_eq!(sampled_by_stratum(&out), [24, 6, 6, 24]);
    // masked rows carry no exposure
    assert!(out.rows().iter().filter(|r| !r.delta()).all(|r| r.exposure.is_none()));
}

/// Independent statement of the spill rule using exact fractions compared
/// by cross-multiplication.
fn spill_reference(required: usize, available: [usize; 4]) -> [usize; 4] {
    fn apportion(total: usize, weights: [usize; 4]) -> [usize; 4] {
        let sum: usize = weights.iter().sum();
        if sum == 0 {
            return [0; 4];
        }
        let mut base = [0; 4];
        let mut rema = Vec::new();
        for k in 0..4 {
            base[k] = total * weights[k] / sum;
            rema.push((total * weights[k] % sum, k));
        }
        let left = total - base.iter().sum::<usize>();
        rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in rema.iter().filter(|(_, k)| weights[*k] > 0).take(left) {
            base[k] += 1;
        }
        base
    }
    let quota = apportion(required, [4, 1, 1, 4]);
    let mut take = [0; 4];
    for k in 0..4 {
        take[k] = quota[k].min(available[k]);
    }
    let short = required - take.iter().sum::<usize>();
    let room = [0, 1, 2, 3].map(|k| available[k] - take[k]);
    let extra = apportion(short, room);
    [0, 1, 2, 3].map(|k| take[k] + extra[k])
}

#[test]
fn one_to_three_spills_from_empty_stratum() {
    let noncases = [80, 30, 0, 70];
    let ds = stratified_fixture(50, noncases);
    let out = apply_two_phase(&ds, SamplingDesign::Biased1To3, &mut rng(9)).unwrap();
    let got = sampled_by_stratum(&out);
    assert_eq!(got.iter().sum::<usize>(), 150);
    assert_eq!(got[2], 0);
    assert_eq!(got, spill_reference(150, noncases));
    assert_eq!(got, allocate_noncases(150, noncases).unwrap());
}

#[test]
fn infeasible_design_is_an_error() {
    let ds = stratified_fixture(50, [30, 30, 30, 30]);
    assert!(matches!(
        apply_two_phase(&ds, SamplingDesign::Biased1To3, &mut rng(0)),
        Err(Error::InfeasibleDesign(_))
    ));
}

proptest! {
    #[test]
    fn quota_accounting_is_exact(avail in proptest::array::uniform4(0usize..400), ratio in 1usize..4, cases in 1usize..120) {
        let required = ratio * cases;
        match allocate_noncases(required, avail) {
            Ok(a) => {
                prop_assert_eq!(a.iter().sum::<usize>(), required);
                for k in 0..4 {
                    prop_assert!(a[k] <= avail[k]);
                }
                prop_assert_eq!(a, spill_reference(required, avail));
            }
            Err(_) => prop_assert!(avail.iter().sum::<usize>() < required),
        }
    }
}

fn small_config() -> SimConfig {
    SimConfig {
        population_size: 10_000,
        n: 500,
        reps: 4,
        design: SamplingDesign::Biased1To1,
        seed: 77,
        learner: SimLearner {
            cv_folds: 3,
            n_lambda: 15,
            ..SimLearner::default()
        },
        ..SimConfig::default()
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let cfg = small_config();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&cfg).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one, three);
    let mut csv1 = Vec::new();
    let mut csv3 = Vec::new();
    one.metrics.write_csv(&mut csv1).unwrap();
    three.metrics.write_csv(&mut csv3).unwrap();
    assert_eq!(csv1, csv3);
}

#[test]
fn metrics_are_sane_and_round_trip() {
    let result = run_monte_carlo(&small_config()).unwrap();
    assert_eq!(result.metrics.rows.len(), 7);
    for row in &result.metrics.rows {
        assert!((0.0..=1.0).contains(&row.coverage));
        assert!((0.0..=1.0).contains(&row.type1_or_power));
        assert_eq!(row.rejection_kind, "power");
        if row.reps - row.failed_reps >= 2 {
            assert!(row.mcsd > 0.0);
        }
        assert!(row.x_t_source.starts_with("surrogate"));
    }
    let pl = result.metrics.get(Estimator::Comparator(ComparatorMethod::PlModelX)).unwrap();
    let ple = result.metrics.get(Estimator::Comparator(ComparatorMethod::PlEmpiricalX)).unwrap();
    assert_eq!(pl.bias, ple.bias);
    let mut buf = Vec::new();
    result.metrics.write_csv(&mut buf).unwrap();
    let back = MetricsTable::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, result.metrics);
}

#[test]
fn zero_reps_is_a_config_error() {
    let cfg = SimConfig {
        reps: 0,
        ..small_config()
    };
    assert!(matches!(run_monte_carlo(&cfg), Err(Error::Config(_))));
}

#[test]
fn failed_replicates_are_tallied() {
    // splines at n = 3000 leaves too few noncases for the 1:3 design
    let cfg = SimConfig {
        setting: ConfoundingSetting::Splines,
        design: SamplingDesign::Biased1To3,
        reps: 3,
        estimators: vec![Estimator::Comparator(ComparatorMethod::NaiveMle)],
        ..SimConfig::default()
    };
    let result = run_monte_carlo(&cfg).unwrap();
    let row = &result.metrics.rows[0];
    assert_eq!(row.failed_reps, 3);
    assert!(row.bias.is_nan());
}
