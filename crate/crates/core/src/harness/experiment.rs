use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::environments::{cluster_envs, gen_descriptor_envs, gen_translation_envs, Environment, EnvironmentSet, GeneratorConfig, Task};
use crate::error::{Error, Result};
use crate::harness::metrics::{evaluate, input_sensitivity_ratio, input_weight_ratio};
use crate::objectives::Method;
use crate::trainer::{refit_oracles, train, RefitResult, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub train: TrainConfig,
    /// Values of λ tried per seed; the one with the best validation score is kept.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
}

impl MethodSpec {
    pub fn new(label: impl Into<String>, train: TrainConfig) -> Self {
        MethodSpec { label: label.into(), train, lambda_grid: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    /// Merge the training environments into two before training.
    #[serde(default)]
    pub cluster: bool,
    pub seeds: Vec<u64>,
    /// Refit the oracle heads after training and record the regrets.
    #[serde(default = "default_true")]
    pub refit: bool,
    /// Directory the CLI writes reports into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub methods: Vec<MethodSpec>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(generator: GeneratorConfig, methods: Vec<MethodSpec>, seeds: Vec<u64>) -> Self {
        ExperimentConfig { generator, cluster: false, seeds, refit: true, output: None, methods }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one method and one seed".into()));
        }
        let mut labels: Vec<&str> = self.methods.iter().map(|m| m.label.as_str()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("method labels must be unique".into()));
        }
        for m in &self.methods {
            m.train.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub objective: Method,
    pub seed: u64,
    pub lambda: f64,
    pub best_step: usize,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cross_entropy: Option<f64>,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
    #[serde(default)]
    pub regrets: Vec<RefitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl CellReport {
    /// Every scalar metric of the cell, in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("train".to_string(), self.train), ("validation".to_string(), self.validation), ("test".to_string(), self.test)];
        out.extend(self.extras.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `accuracy` or `mae`.
    pub metric: String,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<Aggregate>,
}

impl RunReport {
    pub fn aggregate(&self, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.metric == metric)
    }

    pub fn cells_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CellReport> + 'a {
        self.cells.iter().filter(move |c| c.method == method)
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_cells(cells: &[CellReport]) -> Vec<Aggregate> {
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for c in cells {
        for (m, v) in c.metrics() {
            let key = (c.method.clone(), m);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, vs)) => vs.push(v),
                None => groups.push((key, vec![v])),
            }
        }
    }
    groups
        .into_iter()
        .map(|((method, metric), vs)| {
            let (mean, std) = mean_std(&vs);
            Aggregate { method, metric, mean, std, n: vs.len() }
        })
        .collect()
}

pub fn make_envs(generator: &GeneratorConfig, seed: u64, cluster: bool) -> Result<EnvironmentSet> {
    let envs = match generator {
        GeneratorConfig::Translation(c) => gen_translation_envs(c, seed)?,
        GeneratorConfig::Descriptor(c) => gen_descriptor_envs(c, seed)?,
        GeneratorConfig::External => return Err(Error::Config("experiments need a synthetic generator".into())),
    };
    if cluster {
        cluster_envs(&envs)
    } else {
        Ok(envs)
    }
}

fn pooled(train: &[Environment]) -> Result<Environment> {
    Environment::new(usize::MAX, train.iter().flat_map(|e| e.examples.iter().cloned()).collect())
}

/// Train one method on one dataset, selecting λ by validation.
pub fn run_cell(envs: &EnvironmentSet, spec: &MethodSpec, seed: u64, refit: bool) -> Result<CellReport> {
    let grid = if spec.lambda_grid.is_empty() { vec![spec.train.objective.lambda] } else { spec.lambda_grid.clone() };
    let mut best = None;
    for &lambda in &grid {
        let mut cfg = spec.train.clone();
        cfg.seed = seed;
        cfg.objective.lambda = lambda;
        let out = train(envs, &cfg)?;
        if best.as_ref().is_none_or(|(_, b): &(f64, crate::trainer::TrainOutput)| out.best_val > b.best_val) {
            best = Some((lambda, out));
        }
    }
    let (lambda, out) = best.expect("grid is non-empty");
    let mut players = out.best;
    let train_m = evaluate(&players, &pooled(&envs.train)?)?;
    let val_m = evaluate(&players, &envs.validation)?;
    let test_m = evaluate(&players, &envs.test)?;
    let mut extras = BTreeMap::new();
    if matches!(envs.meta.config, GeneratorConfig::Translation(_)) {
        extras.insert("weight_ratio".to_string(), input_weight_ratio(&players, 0, 1));
        let x = pooled(&envs.train)?.to_batch().x;
        extras.insert("sensitivity_ratio".to_string(), input_sensitivity_ratio(&players, &x, 0, 1)?);
    }
    let regrets = if refit {
        let alpha = (spec.train.objective.method == Method::Srgm).then_some(spec.train.objective.alpha);
        refit_oracles(&mut players, envs, &spec.train.refit, alpha)?
    } else {
        Vec::new()
    };
    Ok(CellReport {
        method: spec.label.clone(),
        objective: spec.train.objective.method,
        seed,
        lambda,
        best_step: out.best_step,
        train: train_m.primary(),
        validation: val_m.primary(),
        test: test_m.primary(),
        test_cross_entropy: test_m.cross_entropy,
        extras,
        regrets,
        aborted: out.aborted,
    })
}

fn failed_cell(spec: &MethodSpec, seed: u64, err: &Error) -> CellReport {
    CellReport {
        method: spec.label.clone(),
        objective: spec.train.objective.method,
        seed,
        lambda: spec.train.objective.lambda,
        best_step: 0,
        train: f64::NAN,
        validation: f64::NAN,
        test: f64::NAN,
        test_cross_entropy: None,
        extras: BTreeMap::new(),
        regrets: Vec::new(),
        aborted: Some(format!("{}: {err}", err.kind())),
    }
}

/// Every (method, seed) pair on freshly generated data for that seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut task = None;
    for &seed in &cfg.seeds {
        let envs = make_envs(&cfg.generator, seed, cfg.cluster)?;
        task = Some(envs.task);
        for spec in &cfg.methods {
            cells.push(run_cell(&envs, spec, seed, cfg.refit).unwrap_or_else(|e| failed_cell(spec, seed, &e)));
        }
    }
    let metric = match task {
        Some(Task::Regression) => "mae",
        _ => "accuracy",
    };
    Ok(RunReport { metric: metric.into(), aggregates: aggregate_cells(&cells), cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub severity: f64,
    pub method: String,
    pub mean_test: f64,
    /// Test error (1 − accuracy, or MAE) of the method over that of ERM.
    pub error_ratio: f64,
}

fn set_severity(generator: &mut GeneratorConfig, level: f64) -> Result<()> {
    match generator {
        GeneratorConfig::Translation(c) => c.x1_label_shift = level,
        GeneratorConfig::Descriptor(c) => c.spurious_strength = level,
        GeneratorConfig::External => return Err(Error::Config("severity sweeps need a synthetic generator".into())),
    }
    Ok(())
}

/// Rerun the experiment at each shift severity and compare test error to ERM.
pub fn sweep_shift_severity(base: &ExperimentConfig, levels: &[f64]) -> Result<Vec<SweepRow>> {
    if levels.len() < 2 {
        return Err(Error::Config(format!("severity sweep needs at least two levels, got {}", levels.len())));
    }
    let erm = base
        .methods
        .iter()
        .find(|m| m.train.objective.method == Method::Erm)
        .ok_or_else(|| Error::Config("severity sweep needs an ERM baseline".into()))?
        .label
        .clone();
    let mut rows = Vec::new();
    for &level in levels {
        let mut cfg = base.clone();
        set_severity(&mut cfg.generator, level)?;
        let report = run_experiment(&cfg)?;
        let error = |label: &str| -> f64 {
            let m = report.aggregate(label, "test").map_or(f64::NAN, |a| a.mean);
            if report.metric == "accuracy" {
                1.0 - m
            } else {
                m
            }
        };
        let base_err = error(&erm);
        for spec in &cfg.methods {
            let mean_test = report.aggregate(&spec.label, "test").map_or(f64::NAN, |a| a.mean);
            rows.push(SweepRow { severity: level, method: spec.label.clone(), mean_test, error_ratio: error(&spec.label) / base_err });
        }
    }
    Ok(rows)
}
