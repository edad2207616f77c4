//! Flat TOML experiment configs.
//!
//! Training keys carry the `TrainConfig` field names (`M` and `K` for the MC
//! sample count and the low-rank constant); the rest describe the task and the
//! seeds / grid. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vpng_core::kfac::KfacConfig;
use vpng_core::optim::{AdapterConfig, AdapterKind, CurvatureBackend, Damping, FisherExpectation, Method, TrainConfig};

use crate::experiment::{AucScore, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.line, &self.field) {
            (Some(l), Some(k)) => write!(f, "line {l}, field `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "field `{k}`: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MethodName {
    Grad,
    Ng,
    Vpng,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AdapterName {
    None,
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendName {
    Dense,
    Kfac,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ExpectationName {
    Sampled,
    Exact,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TaskName {
    Toy,
    Logreg,
    Images,
    Ratings,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AucName {
    PredictiveMean,
    PluginMean,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MuValue {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Option<TaskName>,

    method: Option<MethodName>,
    curvature_backend: Option<BackendName>,
    step_size: Option<f64>,
    adapter: Option<AdapterName>,
    rmsprop_decay: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adapter_eps: Option<f64>,
    #[serde(rename = "M")]
    m: Option<usize>,
    mu: Option<MuValue>,
    beta: Option<f64>,
    batch_size: Option<usize>,
    max_iters: Option<usize>,
    time_budget_s: Option<f64>,
    eval_every: Option<usize>,
    seed: Option<u64>,
    #[serde(rename = "K")]
    k: Option<f64>,
    rho: Option<f64>,
    truncate_above: Option<usize>,
    fisher_expectation: Option<ExpectationName>,
    latent_draws: Option<usize>,

    n: Option<usize>,
    n_test: Option<usize>,
    movies: Option<usize>,
    data_seed: Option<u64>,
    data_path: Option<PathBuf>,
    min_ratings: Option<usize>,
    latent_dim: Option<usize>,
    hidden: Option<usize>,
    prior_sd: Option<f64>,
    init_log_sd: Option<f64>,
    eps_corr: Option<f64>,
    sigma_q: Option<f64>,
    eval_mc_samples: Option<usize>,
    eval_train_max: Option<usize>,
    auc_score: Option<AucName>,

    seeds: Option<usize>,
    methods: Option<Vec<MethodName>>,
    step_sizes: Option<Vec<f64>>,
    adapters: Option<Vec<AdapterName>>,
    record_wall_clock: Option<bool>,
}

/// A validated config: the task, the base training config, the seeds, and
/// the grid axes (each defaulting to the single base value).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub step_sizes: Vec<f64>,
    pub adapters: Vec<AdapterKind>,
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            field: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            let message = e.message().to_string();
            let field = unknown_field(&message);
            ConfigError { line, field, message }
        })?;
        build(raw, text)
    }

    /// One config per grid cell (method × adapter × step size), in that nesting order.
    pub fn grid(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &kind in &self.adapters {
                for &step_size in &self.step_sizes {
                    out.push(TrainConfig {
                        method,
                        step_size,
                        adapter: AdapterConfig { kind, ..self.train.adapter },
                        ..self.train.clone()
                    });
                }
            }
        }
        out
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned, if it is.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| l.trim_start().strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('='))).map(|i| i + 1)
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn build(raw: RawConfig, text: &str) -> Result<ExperimentConfig, ConfigError> {
    let fail = |field: &str, message: String| ConfigError { line: line_of_key(text, field), field: Some(field.to_string()), message };
    let task_kind = match raw.task {
        Some(TaskName::Toy) => TaskKind::Toy,
        Some(TaskName::Logreg) => TaskKind::Logreg,
        Some(TaskName::Images) => TaskKind::Images,
        Some(TaskName::Ratings) => TaskKind::Ratings,
        None => return Err(ConfigError { line: None, field: Some("task".into()), message: "missing required key".into() }),
    };

    let mut task = TaskSpec::new(task_kind);
    macro_rules! set {
        ($target:expr, $($field:ident),*) => { $(if let Some(v) = raw.$field.clone() { $target.$field = v; })* };
    }
    set!(task, n, n_test, movies, data_seed, min_ratings, latent_dim, hidden, prior_sd, init_log_sd, eps_corr, sigma_q, eval_mc_samples, eval_train_max);
    task.data_path = raw.data_path.clone();
    if let Some(a) = raw.auc_score {
        task.auc_score = match a {
            AucName::PredictiveMean => AucScore::PredictiveMean,
            AucName::PluginMean => AucScore::PluginMean,
        };
    }

    let mut train = TrainConfig::default();
    set!(train, step_size, beta, batch_size, max_iters, eval_every, seed, latent_draws);
    if let Some(m) = raw.m {
        train.mc_samples = m;
    }
    train.time_budget_s = raw.time_budget_s;
    if let Some(m) = raw.method {
        train.method = method_of(m);
    }
    if let Some(b) = raw.curvature_backend {
        train.curvature_backend = match b {
            BackendName::Dense => CurvatureBackend::Dense,
            BackendName::Kfac => CurvatureBackend::Kfac,
        };
    }
    if let Some(a) = raw.adapter {
        train.adapter.kind = adapter_of(a);
    }
    set!(train.adapter, rmsprop_decay, adam_beta1, adam_beta2);
    if let Some(e) = raw.adapter_eps {
        train.adapter.eps = e;
    }
    train.mu = match raw.mu {
        None => train.mu,
        Some(MuValue::Value(v)) => Damping::Constant(v),
        Some(MuValue::Keyword(k)) if k == "auto" => Damping::TraceScaled,
        Some(MuValue::Keyword(k)) => return Err(fail("mu", format!("expected a number or \"auto\", got {k:?}"))),
    };
    let mut kfac = KfacConfig::default();
    set!(kfac, rho, truncate_above);
    if let Some(k) = raw.k {
        kfac.k = k;
    }
    train.kfac = kfac;
    if let Some(f) = raw.fisher_expectation {
        train.fisher_expectation = match f {
            ExpectationName::Sampled => FisherExpectation::Sampled,
            ExpectationName::Exact => FisherExpectation::Exact,
        };
    }

    // Field-level checks first, so the message names the offending key.
    let positive = |v: f64| v > 0.0 && v.is_finite();
    let unit = |v: f64| (0.0..1.0).contains(&v);
    let checks: [(&str, bool, &str); 14] = [
        ("step_size", positive(train.step_size), "must be positive"),
        ("M", train.mc_samples >= 1, "must be at least 1"),
        ("mu", !matches!(train.mu, Damping::Constant(v) if !(v >= 0.0 && v.is_finite())), "must be nonnegative"),
        ("beta", train.beta > 0.0 && train.beta <= 1.0, "must lie in (0, 1]"),
        ("batch_size", train.batch_size >= 1, "must be at least 1"),
        ("eval_every", train.eval_every >= 1, "must be at least 1"),
        ("rho", unit(train.kfac.rho), "must lie in [0, 1)"),
        ("K", positive(train.kfac.k), "must be positive"),
        ("latent_draws", train.latent_draws >= 1, "must be at least 1"),
        ("rmsprop_decay", unit(train.adapter.rmsprop_decay), "must lie in [0, 1)"),
        ("adam_beta1", unit(train.adapter.adam_beta1), "must lie in [0, 1)"),
        ("adam_beta2", unit(train.adapter.adam_beta2), "must lie in [0, 1)"),
        ("n", task.n >= 1, "must be at least 1"),
        ("eval_mc_samples", task.eval_mc_samples >= 1, "must be at least 1"),
    ];
    for (field, ok, message) in checks {
        if !ok {
            return Err(fail(field, message.to_string()));
        }
    }
    if let Some(t) = train.time_budget_s {
        if !positive(t) {
            return Err(fail("time_budget_s", "must be positive".into()));
        }
    }
    train.validate().map_err(|e| ConfigError { line: None, field: None, message: e.to_string() })?;

    let n_seeds = raw.seeds.unwrap_or(1);
    if n_seeds == 0 {
        return Err(fail("seeds", "must be at least 1".into()));
    }
    let seeds = (0..n_seeds as u64).map(|i| train.seed + i).collect();
    let methods = raw.methods.map(|v| v.into_iter().map(method_of).collect()).unwrap_or_else(|| vec![train.method]);
    let step_sizes = raw.step_sizes.unwrap_or_else(|| vec![train.step_size]);
    let adapters = raw.adapters.map(|v| v.into_iter().map(adapter_of).collect()).unwrap_or_else(|| vec![train.adapter.kind]);
    if methods.is_empty() {
        return Err(fail("methods", "must not be empty".into()));
    }
    if step_sizes.is_empty() || step_sizes.iter().any(|s| !positive(*s)) {
        return Err(fail("step_sizes", "must be a non-empty list of positive numbers".into()));
    }
    if adapters.is_empty() {
        return Err(fail("adapters", "must not be empty".into()));
    }
    Ok(ExperimentConfig { task, train, seeds, methods, step_sizes, adapters, record_wall_clock: raw.record_wall_clock.unwrap_or(false) })
}

fn method_of(m: MethodName) -> Method {
    match m {
        MethodName::Grad => Method::Grad,
        MethodName::Ng => Method::Ng,
        MethodName::Vpng => Method::Vpng,
    }
}

fn adapter_of(a: AdapterName) -> AdapterKind {
    match a {
        AdapterName::None => AdapterKind::None,
        AdapterName::Rmsprop => AdapterKind::RmsProp,
        AdapterName::Adam => AdapterKind::Adam,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let c = ExperimentConfig::parse(
            r#"
task = "logreg"
method = "vpng"
step_size = 0.1
adapter = "none"
M = 10
mu = 1e-3
max_iters = 2000
eval_every = 100
fisher_expectation = "exact"
seeds = 3
seed = 5
"#,
        )
        .unwrap();
        assert_eq!(c.task.kind, TaskKind::Logreg);
        assert_eq!(c.train.mu, Damping::Constant(1e-3));
        assert_eq!(c.train.fisher_expectation, FisherExpectation::Exact);
        assert_eq!(c.seeds, vec![5, 6, 7]);
        assert_eq!(c.grid().len(), 1);
    }

    #[test]
    fn mu_auto_and_grid_axes() {
        let c = ExperimentConfig::parse(
            "task = \"ratings\"\nmu = \"auto\"\nmethods = [\"grad\", \"vpng\"]\nadapters = [\"adam\"]\nstep_sizes = [0.01, 0.03]\n",
        )
        .unwrap();
        assert_eq!(c.train.mu, Damping::TraceScaled);
        let g = c.grid();
        assert_eq!(g.len(), 4);
        assert_eq!((g[3].method, g[3].step_size, g[3].adapter.kind), (Method::Vpng, 0.03, AdapterKind::Adam));
    }

    #[test]
    fn unknown_key_reports_line_and_field() {
        let e = ExperimentConfig::parse("task = \"toy\"\nstep_size = 0.1\nlearning_rate = 3\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.field.as_deref(), Some("learning_rate"));
    }

    #[test]
    fn invalid_value_reports_line_and_field() {
        let e = ExperimentConfig::parse("task = \"toy\"\n\nstep_size = -1.0\n").unwrap_err();
        assert_eq!((e.line, e.field.as_deref()), (Some(3), Some("step_size")));
        let e = ExperimentConfig::parse("task = \"toy\"\nmu = \"lots\"\n").unwrap_err();
        assert_eq!((e.line, e.field.as_deref()), (Some(2), Some("mu")));
        let e = ExperimentConfig::parse("task = \"toy\"\nM = 0\n").unwrap_err();
        assert_eq!(e.field.as_deref(), Some("M"));
        let e = ExperimentConfig::parse("task = \"toy\"\nmethod = \"sgd\"\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(ExperimentConfig::parse("step_size = 0.1\n").unwrap_err().to_string().contains("task"));
    }
}
