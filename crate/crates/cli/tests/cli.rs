use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnd_tmle::simulation::{apply_two_phase, generate_population, sample_phase_one, SamplingDesign, SimConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tnd-tmle"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated two-phase file with columns x_f, x_co, x_t.
fn simulated_csv(dir: &Path, beta_f: f64, seed: u64) -> PathBuf {
    let cfg = SimConfig {
        population_size: 20_000,
        beta_f,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop = generate_population(&cfg, &mut rng);
    let ds = sample_phase_one(&pop, 1500, &mut rng).unwrap();
    let ds = apply_two_phase(&ds, SamplingDesign::Biased1To3, &mut rng).unwrap();
    let path = dir.join(format!("sim_{seed}.csv"));
    ds.save_csv(&path).unwrap();
    path
}

#[test]
fn two_by_two_fixture_gives_odds_ratio_six() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--input",
        s(&examples().join("two_by_two.csv")),
        "--estimators",
        "nMLE,MLEx",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("report.json"));
    let c = &report["tmle"]["contrasts"][0];
    assert!((c["log_or"].as_f64().unwrap() - 6f64.ln()).abs() < 1e-6);
    assert!((c["or"].as_f64().unwrap() - 6.0).abs() < 1e-5);
    assert_eq!(report["command"], "estimate");
    assert_eq!(report["seed"], 0);
    assert!(report["config"]["estimate"].is_object());
    assert!(report["config"].get("simulate").is_none());
    for row in report["comparators"].as_array().unwrap() {
        assert!((row["log_or"].as_f64().unwrap() - 6f64.ln()).abs() < 1e-6);
    }
    let csv = std::fs::read_to_string(dir.path().join("comparators.csv")).unwrap();
    assert!(csv.starts_with("# {"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn null_effect_interval_covers_zero() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated_csv(dir.path(), 0.0, 40);
    let out = run(&[
        "estimate",
        "--config",
        s(&examples().join("estimate.toml")),
        "--input",
        s(&input),
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["tmle"]["converged"], true);
    let c = &report["tmle"]["contrasts"][0];
    let (est, se) = (c["log_or"].as_f64().unwrap(), c["se"].as_f64().unwrap());
    assert!(est.abs() <= 3.0 * se, "log OR {est}, SE {se}");
    assert!(c["ve_ci_low"].as_f64().unwrap() < 0.0 && c["ve_ci_high"].as_f64().unwrap() > 0.0);
    assert_eq!(report["comparators"].as_array().unwrap().len(), 6);
    assert_eq!(report["seed"], 7);
}

#[test]
fn effect_modifier_reports_each_subgroup() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulated_csv(dir.path(), 0.7f64.ln(), 32);
    let cfg = dir.path().join("em.toml");
    std::fs::write(&cfg, "seed = 2\n[estimate]\neffect = [\"intercept\", \"x_co\"]\nknots = 3\ncv_folds = 5\n").unwrap();
    let out = run(&["estimate", "--config", s(&cfg), "--input", s(&input), "--out", s(dir.path())]);
    assert!(out.status.success() || out.status.code() == Some(3));
    let report = json(&dir.path().join("report.json"));
    let contrasts = report["tmle"]["contrasts"].as_array().unwrap();
    assert_eq!(contrasts.len(), 2);
    assert_eq!(contrasts[0]["fx"], serde_json::json!([1.0, 0.0]));
    assert_eq!(contrasts[1]["fx"], serde_json::json!([1.0, 1.0]));
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "delta,a,y,x\n1,1,1,0.5\n1,0,0,oops\n").unwrap();
    let out = run(&["estimate", "--input", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["estimate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["estimate"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--reps", "2"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--seed", "1", "--design", "1_to_7"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let zero = run(&["simulate", "--seed", "1", "--reps", "0", "--out", s(&dir.path().join("z"))]);
    assert_eq!(zero.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("reps"));
    assert!(!dir.path().join("z").exists());
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

fn small_simulation(out: &Path, n: &str) -> Output {
    run(&[
        "simulate", "--seed", "11", "--reps", "3", "--n", n, "--design", "biased_1_1", "--estimators", "TMLE,PLEx,nMLE",
        "--threads", "2", "--out", s(out),
    ])
}

#[test]
fn simulate_is_byte_reproducible_and_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(small_simulation(&a, "400").status.success());
    assert!(small_simulation(&b, "400").status.success());
    for f in ["metrics.csv", "metrics.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rerun = run(&["simulate", "--config", s(&a.join("metrics.json")), "--out", s(&c)]);
    assert!(rerun.status.success());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(c.join("metrics.csv")).unwrap());

    let report = json(&a.join("metrics.json"));
    assert_eq!(report["seed"], 11);
    assert_eq!(report["metrics"].as_array().unwrap().len(), 3);
    assert!(report["tolerances"]["targeting"]["max_iter"].as_u64().is_some());
    assert_eq!(report["config"]["simulate"]["learner"]["knots"], 3);
}

#[test]
fn full_grid_expands_to_108_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n[simulate]\nfull_grid = true\nreps = 1\npopulation_size = 8000\nestimators = [\"nMLE\", \"MLEx\"]\n",
    )
    .unwrap();
    let out = run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.iter().filter(|l| l.starts_with("nMLE,")).count(), 108);
    assert_eq!(rows.len(), 216);
}

#[test]
fn summarize_merges_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_simulation(&a, "400").status.success());
    assert!(small_simulation(&b, "500").status.success());
    let body = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect()
    };

    let one = dir.path().join("one");
    assert!(run(&["summarize", "--input", s(&a.join("metrics.csv")), "--out", s(&one)]).status.success());
    assert_eq!(body(&one.join("summary.csv")), body(&a.join("metrics.csv")));

    let two = dir.path().join("two");
    let out = run(&["summarize", "--input", s(&a.join("metrics.csv")), "--input", s(&b.join("metrics.csv")), "--out", s(&two)]);
    assert!(out.status.success());
    let merged = body(&two.join("summary.csv"));
    assert_eq!(merged.len(), 1 + 6);

    let dup = run(&["summarize", "--input", s(&a.join("metrics.csv")), "--input", s(&a.join("metrics.csv")), "--out", s(&two)]);
    assert_eq!(dup.status.code(), Some(2));
    let err = String::from_utf8_lossy(&dup.stderr);
    assert!(err.contains("TMLE/main_effects/biased_1_1/400"), "{err}");

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "a,b\n1,2\n").unwrap();
    assert_eq!(run(&["summarize", "--input", s(&wrong), "--out", s(&two)]).status.code(), Some(2));
}
