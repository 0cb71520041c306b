//! `tnd-tmle`: targeted estimation on test-negative data, Monte Carlo
//! sweeps, and merging of metrics tables.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tnd_tmle::simulation::{ConfoundingSetting, SamplingDesign};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "tnd-tmle", version, about = "TMLE for test-negative designs with two-phase exposure measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the conditional odds ratio on a CSV dataset.
    Estimate(Flags),
    /// Run a simulation scenario or the full scenario grid.
    Simulate(Flags),
    /// Merge metrics tables written by `simulate`.
    Summarize(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Input CSV; repeat for `summarize`.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// TOML config, or a JSON report from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    design: Option<SamplingDesign>,
    #[arg(long)]
    setting: Option<ConfoundingSetting>,
    #[arg(long = "beta-f", allow_negative_numbers = true)]
    beta_f: Option<f64>,
    /// Phase-one sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated estimator labels.
    #[arg(long)]
    estimators: Option<String>,
    /// Number of cross-fitting folds for the nuisance fits.
    #[arg(long = "cross-fit")]
    cross_fit: Option<usize>,
    #[arg(long = "ci-level")]
    ci_level: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long = "full-grid")]
    full_grid: bool,
}

/// A failure together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_ESTIMATION: u8 = 3;

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn estimation(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_ESTIMATION,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl From<tnd_tmle::Error> for Failure {
    fn from(e: tnd_tmle::Error) -> Self {
        use tnd_tmle::Error as E;
        let code = match &e {
            E::Config(_) | E::UnknownCovariate(_) => EXIT_USAGE,
            E::Io(_) | E::Parse { .. } | E::Schema(_) | E::Missingness { .. } | E::InvalidData(_) => EXIT_DATA,
            E::NonConvergence { .. } | E::Separation { .. } | E::Singular(_) | E::InfeasibleDesign(_) => {
                EXIT_ESTIMATION
            }
        };
        Self { code, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_DATA,
            error: e.into(),
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Estimate,
    Simulate,
    Summarize,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Estimate => "estimate",
            Mode::Simulate => "simulate",
            Mode::Summarize => "summarize",
        }
    }
}

/// Layers flags over the config file and checks what each command needs.
fn resolve(mode: Mode, flags: Flags) -> Outcome<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = flags.threads {
        cfg.threads = Some(t);
    }
    if let Some(l) = flags.ci_level {
        cfg.ci_level = l;
    }
    if let Some(o) = flags.out {
        cfg.out = o;
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(Failure::usage(format!("--ci-level must lie in (0, 1), got {}", cfg.ci_level)));
    }
    if cfg.threads == Some(0) {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    let estimators = flags.estimators.as_deref().map(config::split_list);

    match mode {
        Mode::Estimate => {
            let est = &mut cfg.estimate;
            match flags.input.len() {
                0 => {}
                1 => est.input = Some(flags.input[0].clone()),
                _ => return Err(Failure::usage("estimate takes a single --input")),
            }
            if let Some(k) = flags.cross_fit {
                est.cross_fit = Some(k);
            }
            cfg.seed.get_or_insert(0);
            if let Some(list) = estimators {
                est.comparators = list.into_iter().filter(|e| !e.eq_ignore_ascii_case("TMLE")).collect();
            }
            let Some(input) = &est.input else {
                return Err(Failure::usage("estimate needs --input or `estimate.input` in the config"));
            };
            if !input.is_file() {
                return Err(Failure::usage(format!("input file {} not found", input.display())));
            }
        }
        Mode::Simulate => {
            let sim = &mut cfg.simulate;
            let sc = &mut sim.scenario;
            if let Some(r) = flags.reps {
                sc.reps = r;
            }
            if let Some(d) = flags.design {
                sc.design = d;
            }
            if let Some(s) = flags.setting {
                sc.setting = s;
            }
            if let Some(b) = flags.beta_f {
                sc.beta_f = b;
            }
            if let Some(n) = flags.n {
                sc.n = n;
            }
            if let Some(k) = flags.cross_fit {
                sc.learner.cross_fit = Some(k);
            }
            if let Some(list) = estimators {
                sc.estimators = list
                    .iter()
                    .map(|e| e.parse())
                    .collect::<Result<_, tnd_tmle::Error>>()?;
            }
            if flags.full_grid {
                sim.full_grid = true;
            }
            let Some(seed) = cfg.seed else {
                return Err(Failure::usage("simulate needs --seed or `seed` in the config"));
            };
            sc.seed = seed;
            sc.level = cfg.ci_level;
            sc.validate()?;
        }
        Mode::Summarize => {
            if !flags.input.is_empty() {
                cfg.summarize.inputs = flags.input.clone();
            }
            if cfg.summarize.inputs.is_empty() {
                return Err(Failure::usage("summarize needs at least one --input"));
            }
            if let Some(missing) = cfg.summarize.inputs.iter().find(|p| !p.is_file()) {
                return Err(Failure::usage(format!("input file {} not found", missing.display())));
            }
        }
    }
    Ok(cfg)
}

fn run(mode: Mode, flags: Flags) -> Outcome<()> {
    let cfg = resolve(mode, flags)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot start thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::usage(format!("cannot create output directory {}: {e}", cfg.out.display())))?;
    match mode {
        Mode::Estimate => commands::estimate(&cfg),
        Mode::Simulate => commands::simulate(&cfg),
        Mode::Summarize => commands::summarize(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (mode, flags) = match cli.command {
        Command::Estimate(f) => (Mode::Estimate, f),
        Command::Simulate(f) => (Mode::Simulate, f),
        Command::Summarize(f) => (Mode::Summarize, f),
    };
    match run(mode, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
