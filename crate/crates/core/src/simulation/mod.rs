//! Monte Carlo harness: population generation, phase-one and two-phase
//! sampling, and performance metrics for every estimator.

mod dgm;
mod monte_carlo;
mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comparators::ComparatorMethod;
use crate::error::{Error, Result};

pub use dgm::{
    generate_population, prob_exposure, prob_infection, prob_other_pathogen, prob_symptomatic,
    CalendarSurrogate, PopulationRow, P_COMORBID, P_FEMALE,
};
pub use monte_carlo::{
    run_monte_carlo, run_replicate, EstimateRecord, MetricsRow, MetricsTable, ReplicateOutcome,
    SimulationResult, TmleDiagnostics,
};
pub use sampling::{
    allocate_noncases, apply_two_phase, noncase_stratum, sample_phase_one, simulation_schema,
    to_dataset, NONCASE_SHARES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfoundingSetting {
    MainEffects,
    Interaction,
    Splines,
}

impl ConfoundingSetting {
    pub const ALL: [ConfoundingSetting; 3] = [
        ConfoundingSetting::MainEffects,
        ConfoundingSetting::Interaction,
        ConfoundingSetting::Splines,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConfoundingSetting::MainEffects => "main_effects",
            ConfoundingSetting::Interaction => "interaction",
            ConfoundingSetting::Splines => "splines",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplingDesign {
    /// One noncase per case.
    #[serde(rename = "biased_1_1")]
    Biased1To1,
    /// Three noncases per case.
    #[serde(rename = "biased_1_3")]
    Biased1To3,
    /// Exposure measured on everyone.
    #[serde(rename = "all")]
    All,
}

impl SamplingDesign {
    pub const ALL: [SamplingDesign; 3] = [
        SamplingDesign::Biased1To1,
        SamplingDesign::Biased1To3,
        SamplingDesign::All,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SamplingDesign::Biased1To1 => "biased_1_1",
            SamplingDesign::Biased1To3 => "biased_1_3",
            SamplingDesign::All => "all",
        }
    }

    /// Noncases sampled per case, or `None` when everyone is measured.
    pub fn noncase_ratio(self) -> Option<usize> {
        match self {
            SamplingDesign::Biased1To1 => Some(1),
            SamplingDesign::Biased1To3 => Some(3),
            SamplingDesign::All => None,
        }
    }
}

macro_rules! label_parsing {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.label().eq_ignore_ascii_case(s))
                    .ok_or_else(|| Error::Config(format!("unknown {} `{s}`", $what)))
            }
        }
    };
}

label_parsing!(ConfoundingSetting, "confounding setting");
label_parsing!(SamplingDesign, "sampling design");

/// One of the seven estimators compared in the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Tmle,
    Comparator(ComparatorMethod),
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Tmle,
        Estimator::Comparator(ComparatorMethod::PlModelX),
        Estimator::Comparator(ComparatorMethod::PlEmpiricalX),
        Estimator::Comparator(ComparatorMethod::MleX),
        Estimator::Comparator(ComparatorMethod::NaivePlModel),
        Estimator::Comparator(ComparatorMethod::NaivePlEmpirical),
        Estimator::Comparator(ComparatorMethod::NaiveMle),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Tmle => "TMLE",
            Estimator::Comparator(m) => m.label(),
        }
    }
}

label_parsing!(Estimator, "estimator");

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.label().to_string()
    }
}

/// Nuisance learner used by the TMLE arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimLearner {
    /// Hinge knots on the calendar covariate.
    pub knots: usize,
    pub degree: u8,
    pub cv_folds: usize,
    pub n_lambda: usize,
    pub cross_fit: Option<usize>,
}

impl Default for SimLearner {
    fn default() -> Self {
        Self {
            knots: 3,
            degree: 2,
            cv_folds: 10,
            n_lambda: 50,
            cross_fit: None,
        }
    }
}

/// A single simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub population_size: usize,
    pub n: usize,
    pub setting: ConfoundingSetting,
    pub beta_f: f64,
    pub design: SamplingDesign,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    /// Confidence level of the reported intervals.
    pub level: f64,
    pub calendar: CalendarSurrogate,
    pub learner: SimLearner,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population_size: 50_000,
            n: 3000,
            setting: ConfoundingSetting::MainEffects,
            beta_f: 0.7f64.ln(),
            design: SamplingDesign::All,
            reps: 1000,
            seed: 20_201,
            estimators: Estimator::ALL.to_vec(),
            level: 0.95,
            calendar: CalendarSurrogate::default(),
            learner: SimLearner::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("phase-one size n must be at least 1".into()));
        }
        if self.population_size < self.n {
            return Err(Error::Config(format!(
                "population size {} is smaller than n = {}",
                self.population_size, self.n
            )));
        }
        if !self.beta_f.is_finite() {
            return Err(Error::Config("beta_f must be finite".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let c = &self.calendar;
        if !(c.sd > 0.0 && c.sd.is_finite() && c.lower < c.upper && c.lower >= 0.0) {
            return Err(Error::Config(format!("invalid calendar surrogate {c:?}")));
        }
        if self.learner.cv_folds < 2 {
            return Err(Error::Config("learner cv_folds must be at least 2".into()));
        }
        Ok(())
    }

    /// The 3 × 3 × 3 × 4 grid of settings, effects, designs and sizes
    /// built around `self`.
    pub fn full_grid(&self) -> Vec<SimConfig> {
        self.grid(&[500, 1000, 2000, 3000])
    }

    /// Same grid restricted to the given phase-one sizes.
    pub fn grid(&self, sizes: &[usize]) -> Vec<SimConfig> {
        let effects = [0.2f64.ln(), 0.7f64.ln(), 0.0];
        let mut out = Vec::new();
        for setting in ConfoundingSetting::ALL {
            for beta_f in effects {
                for design in SamplingDesign::ALL {
                    for &n in sizes {
                        out.push(SimConfig {
                            setting,
                            beta_f,
                            design,
                            n,
                            ..self.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reps_rejected() {
        let cfg = SimConfig {
            reps: 0,
            ..SimConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_sizes() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.full_grid().len(), 108);
        assert_eq!(cfg.grid(&[1000, 3000]).len(), 54);
    }

    #[test]
    fn labels_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.label().parse::<Estimator>().unwrap(), e);
        }
        for d in SamplingDesign::ALL {
            assert_eq!(d.to_string().parse::<SamplingDesign>().unwrap(), d);
        }
        let json = serde_json::to_string(&Estimator::Tmle).unwrap();
        assert_eq!(json, "\"TMLE\"");
    }
}
