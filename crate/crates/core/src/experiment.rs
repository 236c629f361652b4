//! Scenario x method x seed experiment matrix with a CSV report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{derive_seed, run_pipeline, Method, PipelineConfig, TrainConfig};
use crate::sinkhorn::{Epsilon, SinkhornConfig};
use crate::synth::{make_scenario, ScenarioSpec};

/// The default matrix: three disjoint-label scenarios, five methods, ten seeds.
pub const DEFAULT_EXPERIMENT: &str = r#"# seeds: a count (0..n) or an explicit list
seeds = 10
methods = ["wass", "wass_sinkhorn", "all", "rnd", "mn"]
# 0 trains on importance weights; > 0 resamples that many source rows
budget = 0
mn_top = 3
validation_fraction = 0.2
# Sinkhorn regularization as a fraction of the mean distance
sinkhorn_epsilon = 0.01
sinkhorn_max_iters = 10000

[pretrain]
learning_rate = 0.05
epochs = 100
batch_size = 32
l2_penalty = 1e-4
early_stop_patience = 5

[finetune]
learning_rate = 0.05
epochs = 100
batch_size = 16
l2_penalty = 1e-4
early_stop_patience = 5

[[scenario]]
name = "dda-three-near"
kind = "dda"
k_source = 10
k_target = 3
near = 3
separation = 4.0
stddev = 1.5
dim = 8
per_class_source = 20
per_class_target_train = 10
per_class_target_test = 100

[[scenario]]
name = "dda-one-near"
kind = "dda"
k_source = 10
k_target = 3
near = 1
separation = 4.0
stddev = 1.5
dim = 8
per_class_source = 20
per_class_target_train = 10
per_class_target_test = 100

[[scenario]]
name = "dda-wide"
kind = "dda"
k_source = 15
k_target = 4
near = 2
separation = 5.0
stddev = 2.0
dim = 16
per_class_source = 15
per_class_target_train = 10
per_class_target_test = 100
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn values(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScenario {
    pub name: String,
    /// The spec's own `seed` is ignored; each run derives one from the run seed.
    #[serde(flatten)]
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub budget: usize,
    #[serde(default = "default_mn_top")]
    pub mn_top: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_sinkhorn_epsilon")]
    pub sinkhorn_epsilon: f64,
    #[serde(default = "default_sinkhorn_max_iters")]
    pub sinkhorn_max_iters: usize,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<NamedScenario>,
}

fn default_mn_top() -> usize {
    3
}

fn default_validation_fraction() -> f64 {
    0.2
}

fn default_sinkhorn_epsilon() -> f64 {
    0.01
}

fn default_sinkhorn_max_iters() -> usize {
    10_000
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn default_dda() -> Self {
        ExperimentConfig::from_toml(DEFAULT_EXPERIMENT).expect("built-in config parses")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.values().is_empty() || self.methods.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Config("need at least one seed, method and scenario".into()));
        }
        let mut names: Vec<&str> = self.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("scenario names must be unique".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.pipeline_config(Method::Wass, 0).sinkhorn.validate()
    }

    pub fn pipeline_config(&self, method: Method, seed: u64) -> PipelineConfig {
        PipelineConfig {
            method,
            seed,
            budget: (self.budget > 0).then_some(self.budget),
            pretrain: self.pretrain,
            finetune: self.finetune,
            mn_top: self.mn_top,
            validation_fraction: self.validation_fraction,
            sinkhorn: SinkhornConfig {
                epsilon: Epsilon::MeanCostFraction(self.sinkhorn_epsilon),
                max_iters: self.sinkhorn_max_iters,
                ..SinkhornConfig::default()
            },
        }
    }

    /// Scenario spec for one run seed.
    pub fn scenario_for(&self, index: usize, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            seed: derive_seed(seed, 1000 + index as u64),
            ..self.scenarios[index].spec.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Sinkhorn hit its iteration cap; the numbers come from its best iterate.
    NotConverged,
    Error,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::NotConverged => "not_converged",
            CellStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub status: CellStatus,
    pub accuracy: Option<f64>,
    pub w1_objective: Option<f64>,
    pub support_size: Option<usize>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: Method,
    pub completed: usize,
    pub total: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation over seeds; 0 with fewer than two runs.
    pub accuracy_std: f64,
    pub w1_mean: f64,
    pub support_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<SummaryRow>,
}

fn run_cell(cfg: &ExperimentConfig, index: usize, method: Method, seed: u64) -> CellResult {
    let scenario = &cfg.scenarios[index].name;
    let outcome = make_scenario(&cfg.scenario_for(index, seed)).and_then(|s| {
        run_pipeline(&s.source, &s.target_train, &s.target_test, &cfg.pipeline_config(method, seed))
    });
    match outcome {
        Ok(o) => CellResult {
            scenario: scenario.clone(),
            method,
            seed,
            status: if o.converged == Some(false) { CellStatus::NotConverged } else { CellStatus::Ok },
            accuracy: Some(o.target_eval.accuracy()),
            w1_objective: Some(o.w1_objective),
            support_size: Some(o.support_size),
            message: None,
        },
        Err(e) => CellResult {
            scenario: scenario.clone(),
            method,
            seed,
            status: CellStatus::Error,
            accuracy: None,
            w1_objective: None,
            support_size: None,
            message: Some(e.to_string()),
        },
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Runs every cell on the current rayon pool. Cells are independent and the
/// output order follows the config (scenario, then method, then seed).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seeds = cfg.seeds.values();
    let mut plan = Vec::new();
    for index in 0..cfg.scenarios.len() {
        for &method in &cfg.methods {
            for &seed in &seeds {
                plan.push((index, method, seed));
            }
        }
    }
    let cells: Vec<CellResult> = plan
        .par_iter()
        .map(|&(index, method, seed)| run_cell(cfg, index, method, seed))
        .collect();
    let summaries = cells
        .chunks(seeds.len())
        .map(|group| {
            let done: Vec<&CellResult> = group.iter().filter(|c| c.accuracy.is_some()).collect();
            let acc: Vec<f64> = done.iter().filter_map(|c| c.accuracy).collect();
            let w1: Vec<f64> = done.iter().filter_map(|c| c.w1_objective).collect();
            let support: Vec<f64> = done.iter().filter_map(|c| c.support_size).map(|s| s as f64).collect();
            SummaryRow {
                scenario: group[0].scenario.clone(),
                method: group[0].method,
                completed: done.len(),
                total: group.len(),
                accuracy_mean: mean(&acc),
                accuracy_std: if acc.is_empty() { f64::NAN } else { sample_std(&acc) },
                w1_mean: mean(&w1),
                support_mean: mean(&support),
            }
        })
        .collect();
    Ok(ExperimentResult { cells, summaries })
}

impl ExperimentResult {
    pub fn summary(&self, scenario: &str, method: Method) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|s| s.scenario == scenario && s.method == method)
    }

    /// One row per cell, then one `seed = summary` row per (scenario, method).
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("scenario,method,seed,status,accuracy,accuracy_std,w1_objective,support_size\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},,{},{}\n",
                c.scenario,
                c.method,
                c.seed,
                c.status.as_str(),
                opt(c.accuracy),
                opt(c.w1_objective),
                c.support_size.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        for s in &self.summaries {
            let status = if s.completed == s.total {
                "ok".to_string()
            } else {
                format!("{}/{} ok", s.completed, s.total)
            };
            let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
            out.push_str(&format!(
                "{},{},summary,{},{},{},{},{}\n",
                s.scenario,
                s.method,
                status,
                num(s.accuracy_mean),
                num(s.accuracy_std),
                num(s.w1_mean),
                num(s.support_mean)
            ));
        }
        out
    }
}
