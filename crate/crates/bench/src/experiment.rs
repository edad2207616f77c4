//! Task construction, evaluation and the run / grid drivers.

use std::sync::Arc;

use anyhow::{bail, Context};
use rayon::prelude::*;
use vpng_core::elbo::heldout_elbo;
use vpng_core::family::{EncoderFamily, GlobalGaussian, InputTransform};
use vpng_core::models::{mini_vae_model, poisson_mf_model, sigmoid, LatentModel, LogisticRegressionModel, ToyGaussianModel};
use vpng_core::optim::{train, AdapterKind, EvalPoint, Evaluator, TrainConfig};
use vpng_core::rng::fill_standard_normal;
use vpng_core::{NoiseContext, ParamVector, Stream, ViProblem};

use crate::data::{self, Dataset, ImageOptions, RatingOptions};
use crate::metrics::{compute_auc, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Toy,
    Logreg,
    Images,
    Ratings,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(Self::Toy),
            "logreg" => Ok(Self::Logreg),
            "images" => Ok(Self::Images),
            "ratings" => Ok(Self::Ratings),
            _ => Err(format!("unknown task {s:?}, expected toy, logreg, images or ratings")),
        }
    }
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::Logreg => "logreg",
            Self::Images => "images",
            Self::Ratings => "ratings",
        }
    }
}

/// How logistic-regression scores are formed for the AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AucScore {
    /// E_q[σ(⟨w, x⟩)], averaged over fixed draws of w.
    PredictiveMean,
    /// ⟨E_q[w], x⟩.
    PluginMean,
}

/// Everything about a task that is not a training hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Dataset size (train + test for logreg; train for toy and images; users for ratings).
    pub n: usize,
    pub n_test: usize,
    /// Columns of the ratings matrix.
    pub movies: usize,
    pub data_seed: u64,
    /// IDX image file or comma-separated ratings file; synthetic data when absent.
    pub data_path: Option<std::path::PathBuf>,
    pub min_ratings: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub prior_sd: f64,
    /// Initial log-stddev of a learned global q.
    pub init_log_sd: f64,
    pub eps_corr: f64,
    pub sigma_q: f64,
    /// MC samples per point for held-out ELBO evaluation.
    pub eval_mc_samples: usize,
    /// Cap on the fixed train subset used for the train ELBO.
    pub eval_train_max: usize,
    pub auc_score: AucScore,
    /// Draws of w behind the predictive-mean score.
    pub auc_draws: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let base = Self {
            kind,
            n: 100,
            n_test: 0,
            movies: 0,
            data_seed: 0,
            data_path: None,
            min_ratings: 5000,
            latent_dim: 2,
            hidden: 0,
            prior_sd: 1.0,
            init_log_sd: 0.0,
            eps_corr: 0.01,
            sigma_q: 0.1,
            eval_mc_samples: 10,
            eval_train_max: 1000,
            auc_score: AucScore::PredictiveMean,
            auc_draws: 200,
        };
        match kind {
            TaskKind::Toy => base,
            TaskKind::Logreg => Self { n: 500, latent_dim: 5, prior_sd: 100.0, init_log_sd: 0.0, ..base },
            TaskKind::Images => Self { n: 1000, n_test: 200, latent_dim: 10, hidden: 32, ..base },
            TaskKind::Ratings => Self { n: 50, movies: 30, latent_dim: 10, hidden: 32, ..base },
        }
    }
}

/// A problem over the training rows plus held-out rows for evaluation.
pub struct Task {
    pub spec: TaskSpec,
    pub problem: ViProblem,
    pub test: Vec<Vec<f64>>,
    logreg: Option<LogisticRegressionModel>,
}

impl Task {
    pub fn build(spec: &TaskSpec) -> anyhow::Result<Self> {
        let dataset = load_dataset(spec)?;
        let train_rows = dataset.train_rows();
        let test = dataset.test_rows();
        if train_rows.is_empty() || test.is_empty() {
            bail!("task {} needs non-empty train and test sets", spec.kind.as_str());
        }
        let mut logreg = None;
        let problem = match spec.kind {
            TaskKind::Toy => {
                let pts: Vec<[f64; 2]> = train_rows.iter().map(|r| [r[0], r[1]]).collect();
                let model = ToyGaussianModel::new(spec.eps_corr, pts)?;
                ViProblem::new(Arc::new(model), Arc::new(GlobalGaussian::fixed(2, spec.sigma_q)?), Arc::new(train_rows))?
            }
            TaskKind::Logreg => {
                let features = train_rows[0].len() - 1;
                let model = LogisticRegressionModel::new(features, true, spec.prior_sd)?;
                logreg = Some(model.clone());
                let family = GlobalGaussian::learned(features + 1, spec.init_log_sd);
                ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(train_rows))?
            }
            TaskKind::Images => {
                let pixels = train_rows[0].len();
                let model = mini_vae_model(pixels, spec.latent_dim, spec.hidden)?;
                let family = EncoderFamily::new(pixels, &[spec.hidden, spec.hidden], spec.latent_dim, InputTransform::Identity)?;
                ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(train_rows))?
            }
            TaskKind::Ratings => {
                let movies = train_rows[0].len();
                let model = poisson_mf_model(movies, spec.latent_dim)?;
                let family = EncoderFamily::new(movies, &[spec.hidden, spec.hidden], spec.latent_dim, InputTransform::Log1p)?;
                ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(train_rows))?
            }
        };
        Ok(Self { spec: spec.clone(), problem, test, logreg })
    }

    pub fn evaluator(&self, seed: u64) -> TaskEvaluator<'_> {
        let n = self.problem.n();
        let k = n.min(self.spec.eval_train_max);
        // Evenly spaced fixed subset, chosen once.
        let train_points = (0..k).map(|i| self.problem.data()[i * n / k].clone()).collect();
        TaskEvaluator { task: self, train_points, ctx: NoiseContext::new(seed, u64::MAX) }
    }
}

pub fn load_dataset(spec: &TaskSpec) -> anyhow::Result<Dataset> {
    Ok(match (spec.kind, &spec.data_path) {
        (TaskKind::Toy, _) => data::gen_toy_data(spec.n, spec.eps_corr, spec.data_seed),
        (TaskKind::Logreg, _) => data::gen_logreg_data(spec.n, spec.data_seed),
        (TaskKind::Images, None) => data::gen_images(spec.n, spec.n_test, spec.data_seed),
        (TaskKind::Images, Some(p)) => data::load_idx_images(p, ImageOptions { seed: spec.data_seed, ..ImageOptions::default() })
            .with_context(|| format!("loading {}", p.display()))?,
        (TaskKind::Ratings, None) => data::gen_ratings(spec.n, spec.movies, spec.data_seed),
        (TaskKind::Ratings, Some(p)) => data::load_ratings(p, RatingOptions { min_ratings: spec.min_ratings, seed: spec.data_seed, ..RatingOptions::default() })
            .with_context(|| format!("loading {}", p.display()))?,
    })
}

/// Held-out ELBO per point on a fixed train subset and the test rows, plus
/// mean-prediction AUC for logistic regression.
pub struct TaskEvaluator<'a> {
    task: &'a Task,
    train_points: Vec<Vec<f64>>,
    ctx: NoiseContext,
}

impl TaskEvaluator<'_> {
    fn auc(&self, model: &LogisticRegressionModel, rows: &[Vec<f64>], eta: &ParamVector) -> vpng_core::Result<Option<f64>> {
        let (lambda, _) = self.task.problem.split(eta.values());
        let d = model.n_features();
        let scores: Vec<f64> = match self.task.spec.auc_score {
            AucScore::PluginMean => {
                let w = &lambda[..model.latent_dim()];
                rows.iter().map(|r| model.logit(r, w)).collect()
            }
            AucScore::PredictiveMean => {
                let q = self.task.problem.family().evaluate(lambda, &[])?.q;
                let mut rng = self.ctx.key(Stream::Eval, u64::MAX).rng();
                let mut eps = vec![0.0; q.dim()];
                let mut acc = vec![0.0; rows.len()];
                for _ in 0..self.task.spec.auc_draws {
                    fill_standard_normal(&mut rng, &mut eps);
                    let w = q.reparameterize_values(&eps);
                    for (a, r) in acc.iter_mut().zip(rows) {
                        *a += sigmoid(model.logit(r, &w));
                    }
                }
                acc
            }
        };
        let labels: Vec<f64> = rows.iter().map(|r| r[d]).collect();
        // A single-class split has no AUC.
        Ok(compute_auc(&scores, &labels).ok())
    }
}

impl Evaluator for TaskEvaluator<'_> {
    fn evaluate(&mut self, problem: &ViProblem, eta: &ParamVector) -> vpng_core::Result<EvalPoint> {
        let m = self.task.spec.eval_mc_samples;
        let train_elbo = heldout_elbo(problem, eta, &self.train_points, m, self.ctx)?;
        let test_elbo = heldout_elbo(problem, eta, &self.task.test, m, self.ctx)?;
        let (train_auc, test_auc) = match &self.task.logreg {
            Some(model) => (self.auc(model, problem.data(), eta)?, self.auc(model, &self.task.test, eta)?),
            None => (None, None),
        };
        Ok(EvalPoint { train_elbo, test_elbo, train_auc, test_auc })
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub diverged: Option<String>,
}

impl SeedRun {
    /// Grid selection metric: for classification, mean train AUC over the last
    /// evaluations; otherwise the final train ELBO. `None` when diverged.
    pub fn final_metric(&self) -> Option<f64> {
        if self.diverged.is_some() || self.rows.is_empty() {
            return None;
        }
        let last = self.rows.last()?;
        if last.train_auc.is_none() {
            return Some(last.train_elbo);
        }
        let tail = &self.rows[self.rows.len().saturating_sub(crate::metrics::LAST_K)..];
        let v: Option<Vec<f64>> = tail.iter().map(|r| r.train_auc).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn metric_at(&self, iteration: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.iteration == iteration)
    }
}

/// Method label written to the CSV, e.g. "vpng" or "vpng+adam".
pub fn method_label(config: &TrainConfig) -> String {
    match config.adapter.kind {
        AdapterKind::None => config.method.as_str().to_string(),
        AdapterKind::RmsProp => format!("{}+rmsprop", config.method.as_str()),
        AdapterKind::Adam => format!("{}+adam", config.method.as_str()),
    }
}

pub fn run_seed(task: &Task, config: &TrainConfig, record_wall_clock: bool) -> anyhow::Result<SeedRun> {
    let init = task.problem.init_eta(config.seed);
    let mut eval = task.evaluator(config.seed);
    let result = train(&task.problem, config, init, &mut eval)?;
    let method = method_label(config);
    let rows = result
        .records
        .iter()
        .map(|r| MetricsRow {
            iteration: r.iteration,
            wall_clock_s: record_wall_clock.then_some(r.wall_clock_s),
            train_elbo: r.metrics.train_elbo,
            test_elbo: r.metrics.test_elbo,
            train_auc: r.metrics.train_auc,
            test_auc: r.metrics.test_auc,
            method: method.clone(),
            step_size: config.step_size,
            seed: config.seed,
        })
        .collect();
    Ok(SeedRun { seed: config.seed, rows, diverged: result.diverged.map(|e| e.to_string()) })
}

/// Runs `config` once per seed. Seeds run in parallel; results come back in seed order.
pub fn run_seeds(task: &Task, config: &TrainConfig, seeds: &[u64], record_wall_clock: bool) -> anyhow::Result<Vec<SeedRun>> {
    seeds
        .par_iter()
        .map(|&seed| run_seed(task, &TrainConfig { seed, ..config.clone() }, record_wall_clock))
        .collect()
}

/// One grid cell aggregated over seeds.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config: TrainConfig,
    pub runs: Vec<SeedRun>,
    /// Mean final train metric over seeds; `None` if any seed diverged.
    pub metric: Option<f64>,
}

pub fn run_cell(task: &Task, config: &TrainConfig, seeds: &[u64]) -> anyhow::Result<CellResult> {
    let runs = run_seeds(task, config, seeds, false)?;
    let finals: Option<Vec<f64>> = runs.iter().map(SeedRun::final_metric).collect();
    let metric = finals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(CellResult { config: config.clone(), runs, metric })
}

/// Every cell of the grid, plus the index of the best one (largest metric,
/// ties to the smaller step size).
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
    pub best: usize,
}

impl GridOutcome {
    pub fn best(&self) -> &CellResult {
        &self.cells[self.best]
    }
}

pub fn run_grid(task: &Task, configs: &[TrainConfig], seeds: &[u64]) -> anyhow::Result<GridOutcome> {
    let mut cells = Vec::with_capacity(configs.len());
    let grid = vpng_core::optim::grid_search(configs, |c| {
        let cell = run_cell(task, c, seeds).map_err(|e| vpng_core::Error::InvalidArgument(format!("{e:#}")))?;
        let m = cell.metric;
        cells.push(cell);
        Ok(m)
    })?;
    let best = cells.iter().position(|c| c.config == grid.best).expect("best config comes from the grid");
    Ok(GridOutcome { cells, best })
}
