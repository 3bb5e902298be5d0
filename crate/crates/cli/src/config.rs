//! Experiment configuration: a nested key-value file with every knob of
//! the pipeline. Unknown keys are rejected; the fully resolved
//! configuration (defaults filled in) is echoed back and archived next to
//! the run artifacts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub controls: ControlsConfig,
    pub anchors: AnchorsConfig,
    pub checks: ChecksConfig,
    pub output: OutputConfig,
    pub tolerances: TolerancesConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            grid: GridConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            controls: ControlsConfig::default(),
            anchors: AnchorsConfig::default(),
            checks: ChecksConfig::default(),
            output: OutputConfig::default(),
            tolerances: TolerancesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    /// initial state; broadcast to the problem dimension when shorter
    pub initial: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "lq1".into(),
            params: BTreeMap::new(),
            initial: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// simulation steps of the driving ensemble
    pub steps: usize,
    /// induction steps of the value field
    pub dp_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            steps: 500,
            dp_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub paths: usize,
    /// branch draws per induction step / per pointwise value probe
    pub branches: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            paths: 20_000,
            branches: 256,
            seed: 0x5EE1AB,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlsConfig {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// keep the scenario's own control set instead
    pub use_scenario_default: bool,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            lo: -3.0,
            hi: 3.0,
            step: 0.05,
            use_scenario_default: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorsConfig {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for AnchorsConfig {
    fn default() -> Self {
        AnchorsConfig {
            lo: -3.0,
            hi: 3.0,
            step: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    /// named checks to run; see `seelab list-scenarios` for the registry
    pub run: Vec<String>,
    /// sampled times x paths of the pointwise quantifiers
    pub times: usize,
    pub sample_paths: usize,
}

pub const ALL_CHECKS: &[&str] = &[
    "assumptions",
    "pmp",
    "smooth-relations",
    "superdiff",
    "time-inclusion",
    "dpp",
    "transposition",
    "wellposedness",
    "value-regularity",
];

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            run: ALL_CHECKS.iter().map(|s| s.to_string()).collect(),
            times: 20,
            sample_paths: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// output directory; overridden by SEELAB_OUT_DIR when empty
    pub dir: String,
    /// trajectories to dump into trajectories.csv (0 = skip)
    pub trajectories: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: String::new(),
            trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesConfig {
    /// relative tolerance of the smooth-case identities
    pub smooth_relations_rel: f64,
    /// finite-difference step of the derivative probes
    pub fd_step: f64,
    /// membership probe ladder (coarse to fine)
    pub ladder: Vec<f64>,
}

impl Default for TolerancesConfig {
    fn default() -> Self {
        TolerancesConfig {
            smooth_relations_rel: 0.05,
            fd_step: 0.05,
            ladder: vec![0.4, 0.2, 0.1],
        }
    }
}

/// Built-in configurations addressable by name.
pub fn builtin_config(name: &str) -> Option<ExperimentConfig> {
    match name {
        "lq1-smoke" => {
            let mut c = ExperimentConfig::default();
            c.scenario.name = "lq1".into();
            c.grid.steps = 500;
            c.grid.dp_steps = 100;
            c.monte_carlo.paths = 20_000;
            Some(c)
        }
        "heat-smoke" => {
            let mut c = ExperimentConfig::default();
            c.scenario.name = "heat".into();
            c.scenario.params.insert("modes".into(), 2.0);
            c.scenario.initial = vec![0.5, 0.2];
            c.grid.steps = 200;
            c.grid.dp_steps = 50;
            c.monte_carlo.paths = 2_000;
            c.monte_carlo.branches = 64;
            c.controls.use_scenario_default = true;
            c.anchors.lo = -1.5;
            c.anchors.hi = 1.5;
            c.anchors.step = 0.25;
            c.checks.run = vec![
                "assumptions".into(),
                "pmp".into(),
                "dpp".into(),
                "transposition".into(),
                "wellposedness".into(),
                "value-regularity".into(),
            ];
            c.checks.times = 8;
            c.checks.sample_paths = 16;
            Some(c)
        }
        _ => None,
    }
}

pub fn builtin_config_names() -> Vec<&'static str> {
    vec!["lq1-smoke", "heat-smoke"]
}
