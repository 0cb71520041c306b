use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tnd_tmle::simulation::SimConfig;

use crate::{Failure, Mode, Outcome};

/// Everything a run needs, after merging the config file with flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker threads; absent means all available cores.
    pub threads: Option<usize>,
    pub ci_level: f64,
    pub out: PathBuf,
    pub estimate: EstimateConfig,
    pub simulate: SimulateConfig,
    pub summarize: SummarizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            ci_level: 0.95,
            out: PathBuf::from("tnd-tmle-out"),
            estimate: EstimateConfig::default(),
            simulate: SimulateConfig::default(),
            summarize: SummarizeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    /// Terms of the effect design, e.g. `["intercept", "x_co"]`.
    pub effect: Vec<String>,
    pub knots: usize,
    pub degree: u8,
    pub cv_folds: usize,
    pub n_lambda: usize,
    pub cross_fit: Option<usize>,
    /// Comparator labels to run alongside TMLE.
    pub comparators: Vec<String>,
    /// Main-effect adjustment of the comparators; empty means every covariate.
    pub adjust: Vec<String>,
    /// Product terms added for the interaction-adjusted comparators.
    pub interactions: Vec<(String, String)>,
    /// Phase-two sampling strata; empty means every binary covariate.
    pub strata: Vec<String>,
    /// Effect-design vectors at which odds ratios are reported; empty means
    /// every distinct vector in the data when there are few of them.
    pub contrasts: Vec<Vec<f64>>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            input: None,
            effect: vec!["intercept".into()],
            knots: 10,
            degree: 2,
            cv_folds: 10,
            n_lambda: 50,
            cross_fit: None,
            comparators: Vec::new(),
            adjust: Vec::new(),
            interactions: Vec::new(),
            strata: Vec::new(),
            contrasts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    /// Sweep settings × effects × designs × sizes around the scenario below.
    pub full_grid: bool,
    /// Phase-one sizes of the sweep; empty means 500, 1000, 2000, 3000.
    pub sizes: Vec<usize>,
    #[serde(flatten)]
    pub scenario: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeConfig {
    pub inputs: Vec<PathBuf>,
}

impl RunConfig {
    /// The config as JSON with only the section `mode` reads. The output
    /// directory is left out so results do not depend on where they go.
    pub fn for_mode(&self, mode: Mode) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
            for section in [Mode::Estimate, Mode::Simulate, Mode::Summarize] {
                if section != mode {
                    map.remove(section.label());
                }
            }
        }
        v
    }
}

/// Reads a TOML config, or the `config` member of a JSON report written by
/// an earlier run.
pub fn load(path: &Path) -> Outcome<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        serde_json::from_value(value).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
}

/// Comma-separated list helper used by several flags.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}
