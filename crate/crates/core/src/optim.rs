//! The training loop: gradient, direction (plain, q-natural or predictive
//! natural), per-coordinate step adaptation, ascent update.

use std::time::Instant;

use crate::elbo::grad_elbo;
use crate::error::{check_dim, Error, Result};
use crate::fisher::{
    estimate_exact_predictive_fisher, estimate_vpng_fisher, q_fisher_padded, q_natural_direction, sample_predictive_batch_with,
    vpng_direction, FisherEstimate,
};
use crate::kfac::{qfisher_layer_moments, stacked_network_view, vpng_layer_moments, FactorSampling, KfacConfig, KfacState};
use crate::params::ParamVector;
use crate::problem::{Batch, ViProblem};
use crate::rng::NoiseContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grad,
    Ng,
    Vpng,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::Ng => "ng",
            Method::Vpng => "vpng",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Method::Grad),
            "ng" => Ok(Method::Ng),
            "vpng" => Ok(Method::Vpng),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureBackend {
    Dense,
    Kfac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    None,
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rmsprop_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eps: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { kind: AdapterKind::None, rmsprop_decay: 0.9, adam_beta1: 0.9, adam_beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    Constant(f64),
    /// 0.1 · trace / dim of the first curvature estimate, then fixed.
    TraceScaled,
}

/// How the expectation over resampled data enters the predictive Fisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherExpectation {
    /// M draws of x' per latent.
    Sampled,
    /// Closed form over x' at each sampled latent.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub curvature_backend: CurvatureBackend,
    pub step_size: f64,
    pub adapter: AdapterConfig,
    /// Monte Carlo samples M for the ELBO gradient and the Fisher.
    pub mc_samples: usize,
    pub mu: Damping,
    pub beta: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Stop early once this much wall-clock time has elapsed.
    pub time_budget_s: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
    pub kfac: KfacConfig,
    pub fisher_expectation: FisherExpectation,
    /// Latent draws per datapoint for the Fisher estimate.
    pub latent_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Vpng,
            curvature_backend: CurvatureBackend::Dense,
            step_size: 0.1,
            adapter: AdapterConfig::default(),
            mc_samples: 10,
            mu: Damping::TraceScaled,
            beta: 1.0,
            batch_size: usize::MAX,
            max_iters: 1000,
            time_budget_s: None,
            eval_every: 100,
            seed: 0,
            kfac: KfacConfig::default(),
            fisher_expectation: FisherExpectation::Sampled,
            latent_draws: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.mc_samples == 0 {
            return bad("M must be at least 1");
        }
        if let Damping::Constant(mu) = self.mu {
            if !(mu >= 0.0) {
                return bad("mu must be nonnegative");
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.kfac.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(self.kfac.k > 0.0) {
            return bad("K must be positive");
        }
        if self.latent_draws == 0 {
            return bad("latent_draws must be at least 1");
        }
        let a = &self.adapter;
        if !(0.0..1.0).contains(&a.rmsprop_decay) || !(0.0..1.0).contains(&a.adam_beta1) || !(0.0..1.0).contains(&a.adam_beta2) {
            return bad("adapter decay rates must lie in [0, 1)");
        }
        if !(a.eps >= 0.0) {
            return bad("adapter eps must be nonnegative");
        }
        Ok(())
    }
}

/// Per-coordinate moment accumulators of the adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

impl AdapterState {
    pub fn new(dim: usize) -> Self {
        Self { first: vec![0.0; dim], second: vec![0.0; dim], steps: 0 }
    }
}

/// Rescales a direction per coordinate and updates the accumulators.
pub fn adapter_scale(state: &mut AdapterState, direction: &[f64], config: &AdapterConfig) -> Result<Vec<f64>> {
    check_dim(state.second.len(), direction.len())?;
    state.steps += 1;
    Ok(match config.kind {
        AdapterKind::None => direction.to_vec(),
        AdapterKind::RmsProp => {
            let r = config.rmsprop_decay;
            direction
                .iter()
                .zip(state.second.iter_mut())
                .map(|(d, v)| {
                    *v = r * *v + (1.0 - r) * d * d;
                    if *d == 0.0 { 0.0 } else { d / (*v + config.eps).sqrt() }
                })
                .collect()
        }
        AdapterKind::Adam => {
            let (b1, b2) = (config.adam_beta1, config.adam_beta2);
            let t = state.steps.min(i32::MAX as u64) as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            direction
                .iter()
                .zip(state.first.iter_mut().zip(state.second.iter_mut()))
                .map(|(d, (m, v))| {
                    *m = b1 * *m + (1.0 - b1) * d;
                    *v = b2 * *v + (1.0 - b2) * d * d;
                    let mh = *m / c1;
                    if mh == 0.0 { 0.0 } else { mh / ((*v / c2).sqrt() + config.eps) }
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub eta: ParamVector,
    pub adapter: AdapterState,
    /// Completed steps.
    pub iteration: u64,
    pub started: Instant,
    /// Damping once resolved (trace-scaled damping is fixed at the first step).
    pub mu: Option<f64>,
    pub kfac: Option<KfacState>,
}

impl OptimState {
    pub fn new(eta: ParamVector) -> Self {
        let dim = eta.len();
        Self { eta, adapter: AdapterState::new(dim), iteration: 0, started: Instant::now(), mu: None, kfac: None }
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub elbo: f64,
    pub grad_norm: f64,
    pub direction: Vec<f64>,
    pub mu: Option<f64>,
}

/// Test hooks for [`step_with`].
#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    /// Replaces the dense curvature estimate of the vpng method.
    pub fisher_override: Option<FisherEstimate>,
}

pub fn step(state: &mut OptimState, config: &TrainConfig, problem: &ViProblem, batch: &Batch) -> Result<StepReport> {
    step_with(state, config, problem, batch, &StepOptions::default())
}

fn resolve_mu(state: &mut OptimState, config: &TrainConfig, trace: f64, dim: usize) -> f64 {
    *state.mu.get_or_insert_with(|| match config.mu {
        Damping::Constant(mu) => mu,
        Damping::TraceScaled => {
            let v = 0.1 * trace / dim.max(1) as f64;
            if v > 0.0 && v.is_finite() { v } else { 1e-8 }
        }
    })
}

pub fn step_with(state: &mut OptimState, config: &TrainConfig, problem: &ViProblem, batch: &Batch, options: &StepOptions) -> Result<StepReport> {
    let ctx = NoiseContext::new(config.seed, state.iteration);
    let est = grad_elbo(problem, &state.eta, batch, config.mc_samples, config.beta, ctx)?;
    let grad = est.grad.expect("gradient requested");
    let direction: Vec<f64> = match (config.method, config.curvature_backend) {
        (Method::Grad, _) => grad.values().to_vec(),
        (Method::Ng, CurvatureBackend::Dense) => {
            let mu = match config.mu {
                Damping::Constant(_) => resolve_mu(state, config, 0.0, 1),
                Damping::TraceScaled if state.mu.is_some() => state.mu.expect("set"),
                Damping::TraceScaled => {
                    let f = q_fisher_padded(problem, &state.eta, batch)?;
                    let lam = problem.lambda_range().len();
                    resolve_mu(state, config, f.matrix.trace(), lam)
                }
            };
            q_natural_direction(problem, &state.eta, batch, mu, &grad)?.into_values()
        }
        (Method::Ng, CurvatureBackend::Kfac) => {
            let (layers, moments) = qfisher_layer_moments(problem, &state.eta, batch, config.mc_samples, ctx)?;
            let kfac = match &mut state.kfac {
                Some(k) => k,
                slot => slot.insert(KfacState::new(layers, batch.n_total as f64, config.kfac)?),
            };
            kfac.update_factors(&moments)?;
            let (tr, dim) = kfac.trace_and_dim();
            let mu = resolve_mu(state, config, tr, dim);
            state.kfac.as_ref().expect("set").solve_eta(mu, grad.values())?
        }
        (Method::Vpng, CurvatureBackend::Dense) => {
            let f = match &options.fisher_override {
                Some(f) => f.clone(),
                None => {
                    let pred = sample_predictive_batch_with(problem, &state.eta, batch, config.mc_samples, config.latent_draws, ctx)?;
                    match config.fisher_expectation {
                        FisherExpectation::Sampled => estimate_vpng_fisher(problem, &state.eta, &pred)?,
                        FisherExpectation::Exact => estimate_exact_predictive_fisher(problem, &state.eta, &pred)?,
                    }
                }
            };
            let mu = resolve_mu(state, config, f.matrix.trace(), f.matrix.dim());
            vpng_direction(&f, mu, &grad)?.into_values()
        }
        (Method::Vpng, CurvatureBackend::Kfac) => {
            let view = stacked_network_view(problem)?;
            if !view.covers(problem.dim()) {
                return Err(Error::NotFeedForward);
            }
            let pred = sample_predictive_batch_with(problem, &state.eta, batch, config.mc_samples, config.latent_draws, ctx)?;
            let sampling = match config.fisher_expectation {
                FisherExpectation::Sampled => FactorSampling::Predictive,
                FisherExpectation::Exact => FactorSampling::Exact,
            };
            let moments = vpng_layer_moments(problem, &state.eta, &pred, &view, sampling)?;
            let kfac = match &mut state.kfac {
                Some(k) => k,
                slot => slot.insert(KfacState::new(view.layers(), batch.n_total as f64, config.kfac)?),
            };
            kfac.update_factors(&moments)?;
            let (tr, dim) = kfac.trace_and_dim();
            let mu = resolve_mu(state, config, tr, dim);
            state.kfac.as_ref().expect("set").solve_eta(mu, grad.values())?
        }
    };
    let scaled = adapter_scale(&mut state.adapter, &direction, &config.adapter)?;
    let eta = state.eta.values_mut();
    for (i, (p, d)) in eta.iter_mut().zip(&scaled).enumerate() {
        *p += config.step_size * d;
        if !p.is_finite() {
            return Err(Error::NonFiniteParameter { iteration: state.iteration, index: i });
        }
    }
    state.iteration += 1;
    let grad_norm = crate::linalg::norm(grad.values());
    Ok(StepReport { elbo: est.value, grad_norm, direction, mu: state.mu })
}

/// Metrics recorded at each evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub train_elbo: f64,
    pub test_elbo: f64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

pub trait Evaluator {
    fn evaluate(&mut self, problem: &ViProblem, eta: &ParamVector) -> Result<EvalPoint>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub iteration: usize,
    pub wall_clock_s: f64,
    pub metrics: EvalPoint,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RunRecord>,
    pub final_eta: ParamVector,
    /// Set when the run stopped on a numerical failure (non-finite parameter,
    /// likelihood or gradient, or a degenerate q).
    pub diverged: Option<Error>,
}

impl RunResult {
    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }
}

/// Runs `max_iters` steps (or until the time budget), evaluating at every
/// multiple of `eval_every`, including iteration 0.
pub fn train(problem: &ViProblem, config: &TrainConfig, init: ParamVector, evaluator: &mut dyn Evaluator) -> Result<RunResult> {
    config.validate()?;
    let mut state = OptimState::new(init);
    let mut records = Vec::new();
    let record = |state: &OptimState, records: &mut Vec<RunRecord>, evaluator: &mut dyn Evaluator| -> Result<()> {
        let metrics = evaluator.evaluate(problem, &state.eta)?;
        records.push(RunRecord { iteration: state.iteration as usize, wall_clock_s: state.started.elapsed().as_secs_f64(), metrics });
        Ok(())
    };
    record(&state, &mut records, evaluator)?;
    let mut diverged = None;
    for it in 0..config.max_iters {
        if let Some(budget) = config.time_budget_s {
            if state.started.elapsed().as_secs_f64() >= budget {
                break;
            }
        }
        let batch = Batch::sampled(problem.n(), config.batch_size, NoiseContext::new(config.seed, it as u64));
        match step(&mut state, config, problem, &batch) {
            Ok(_) => {}
            Err(e) if e.is_divergence() => {
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
        if state.iteration as usize % config.eval_every == 0 {
            record(&state, &mut records, evaluator)?;
        }
    }
    Ok(RunResult { records, final_eta: state.eta, diverged })
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub config: TrainConfig,
    /// Final train metric, `None` when the run diverged.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_metric: f64,
    pub cells: Vec<GridCell>,
}

/// Runs every config through `run` (which returns the final train metric, or
/// `None` on divergence) and picks the largest metric; ties go to the smaller step size.
pub fn grid_search(configs: &[TrainConfig], mut run: impl FnMut(&TrainConfig) -> Result<Option<f64>>) -> Result<GridResult> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(configs.len());
    for c in configs {
        let metric = run(c)?.filter(|m| m.is_finite());
        cells.push(GridCell { config: c.clone(), metric });
    }
    let best = cells
        .iter()
        .filter_map(|c| c.metric.map(|m| (m, c)))
        .fold(None::<(f64, &GridCell)>, |acc, (m, c)| match acc {
            None => Some((m, c)),
            Some((bm, bc)) => {
                if m > bm || (m == bm && c.config.step_size < bc.config.step_size) {
                    Some((m, c))
                } else {
                    Some((bm, bc))
                }
            }
        })
        .ok_or(Error::AllRunsDiverged)?;
    Ok(GridResult { best: best.1.config.clone(), best_metric: best.0, cells })
}
