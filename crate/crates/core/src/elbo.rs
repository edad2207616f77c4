//! Monte Carlo ELBO and its reparameterized gradient over η = (λ, θ).
//!
//! The estimate is (n/B)(1/M) Σ_{i,k} log p(x_i | z_ik; θ) − β KL, where the
//! KL is analytic. For per-datapoint latents the KL is a sum over the batch
//! and gets the same n/B scale. Each datapoint draws its noise from its own
//! counter-based stream, so value and gradient share the same ε.

use crate::error::{Error, Result};
use crate::family::FamilyEval;
use crate::params::ParamVector;
use crate::problem::{Batch, ViProblem};
use crate::reduce::ordered_reduce;
use crate::rng::{fill_standard_normal, NoiseContext, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    /// Gradient over η; `None` for value-only estimates.
    pub grad: Option<ParamVector>,
    /// The (n/B)-scaled expected log-likelihood term.
    pub expected_log_lik: f64,
    /// The (n/B)-scaled KL term, before multiplying by β.
    pub kl: f64,
    pub mc_samples: usize,
    pub beta: f64,
    pub batch: Batch,
}

pub fn estimate_elbo(problem: &ViProblem, eta: &ParamVector, batch: &Batch, m: usize, beta: f64, ctx: NoiseContext) -> Result<ElboEstimate> {
    elbo_pass(problem, eta, batch, m, beta, ctx, false)
}

pub fn grad_elbo(problem: &ViProblem, eta: &ParamVector, batch: &Batch, m: usize, beta: f64, ctx: NoiseContext) -> Result<ElboEstimate> {
    elbo_pass(problem, eta, batch, m, beta, ctx, true)
}

struct Acc {
    ell: f64,
    kl: f64,
    grad: Vec<f64>,
}

fn validate(problem: &ViProblem, eta: &ParamVector, m: usize, beta: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo sample".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    crate::error::check_dim(problem.dim(), eta.len())
}

fn elbo_pass(problem: &ViProblem, eta: &ParamVector, batch: &Batch, m: usize, beta: f64, ctx: NoiseContext, want_grad: bool) -> Result<ElboEstimate> {
    validate(problem, eta, m, beta)?;
    let (lambda, theta) = problem.split(eta.values());
    let lam_dim = lambda.len();
    let model = problem.model();
    let family = problem.family();
    let prior = model.prior_stddev();
    let scale = batch.scale();
    let per = scale / m as f64;
    let global_eval = if problem.is_global() { Some(family.evaluate(lambda, &[])?) } else { None };
    let grad_len = if want_grad { problem.dim() } else { 0 };

    let mut acc = ordered_reduce(
        batch.len(),
        || Acc { ell: 0.0, kl: 0.0, grad: vec![0.0; grad_len] },
        |acc, pos| {
            let i = batch.indices[pos];
            let x = &problem.data()[i];
            let local_eval;
            let eval: &FamilyEval = match &global_eval {
                Some(e) => e,
                None => {
                    local_eval = family.evaluate(lambda, x)?;
                    &local_eval
                }
            };
            let q = &eval.q;
            let d = q.dim();
            let mut rng = ctx.key(Stream::Elbo, i as u64).rng();
            let mut eps = vec![0.0; d];
            let mut gz = vec![0.0; d];
            let mut gm = vec![0.0; d];
            let mut gs = vec![0.0; d];
            let mut sum = 0.0;
            for _ in 0..m {
                fill_standard_normal(&mut rng, &mut eps);
                let z = q.reparameterize_values(&eps);
                let ll = if want_grad {
                    gz.iter_mut().for_each(|v| *v = 0.0);
                    let (_, gtheta) = acc.grad.split_at_mut(lam_dim);
                    let ll = model.log_lik_grad(x, &z, theta, &mut gz, gtheta)?;
                    for k in 0..d {
                        gm[k] += gz[k];
                        gs[k] += gz[k] * eps[k];
                    }
                    ll
                } else {
                    model.log_lik(x, &z, theta)?
                };
                if !ll.is_finite() {
                    return Err(Error::NonFiniteLikelihood);
                }
                sum += ll;
            }
            acc.ell += per * sum;
            if global_eval.is_none() {
                acc.kl += scale * q.kl_to_isotropic(prior);
            }
            if want_grad {
                gm.iter_mut().chain(gs.iter_mut()).for_each(|v| *v *= per);
                if global_eval.is_none() {
                    let (km, ks) = q.kl_gradient(prior);
                    for k in 0..d {
                        gm[k] -= beta * scale * km[k];
                        gs[k] -= beta * scale * ks[k];
                    }
                }
                family.pullback(lambda, eval, &gm, &gs, &mut acc.grad[..lam_dim]);
            }
            Ok(())
        },
        |total, part| {
            total.ell += part.ell;
            total.kl += part.kl;
            for (a, b) in total.grad.iter_mut().zip(part.grad) {
                *a += b;
            }
        },
    )?;

    if let Some(eval) = &global_eval {
        acc.kl = eval.q.kl_to_isotropic(prior);
        if want_grad {
            let (km, ks) = eval.q.kl_gradient(prior);
            let km: Vec<f64> = km.iter().map(|v| -beta * v).collect();
            let ks: Vec<f64> = ks.iter().map(|v| -beta * v).collect();
            family.pullback(lambda, eval, &km, &ks, &mut acc.grad[..lam_dim]);
        }
    }
    let grad = if want_grad {
        // θ gradients were accumulated unscaled.
        acc.grad[lam_dim..].iter_mut().for_each(|v| *v *= per);
        if acc.grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Some(eta.with_values(acc.grad)?)
    } else {
        None
    };
    Ok(ElboEstimate {
        value: acc.ell - beta * acc.kl,
        grad,
        expected_log_lik: acc.ell,
        kl: acc.kl,
        mc_samples: m,
        beta,
        batch: batch.clone(),
    })
}

/// Average per-datapoint ELBO (β = 1) over `points`, which need not be
/// training data. For a global latent each point is charged KL / n_train.
pub fn heldout_elbo(problem: &ViProblem, eta: &ParamVector, points: &[Vec<f64>], m: usize, ctx: NoiseContext) -> Result<f64> {
    validate(problem, eta, m, 1.0)?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    let (lambda, theta) = problem.split(eta.values());
    let model = problem.model();
    let family = problem.family();
    let prior = model.prior_stddev();
    let global_eval = if problem.is_global() { Some(family.evaluate(lambda, &[])?) } else { None };
    let total = ordered_reduce(
        points.len(),
        || 0.0,
        |acc, i| {
            let x = &points[i];
            let local_eval;
            let eval = match &global_eval {
                Some(e) => e,
                None => {
                    local_eval = family.evaluate(lambda, x)?;
                    &local_eval
                }
            };
            let mut rng = ctx.key(Stream::Eval, i as u64).rng();
            let mut eps = vec![0.0; eval.q.dim()];
            let mut sum = 0.0;
            for _ in 0..m {
                fill_standard_normal(&mut rng, &mut eps);
                let ll = model.log_lik(x, &eval.q.reparameterize_values(&eps), theta)?;
                if !ll.is_finite() {
                    return Err(Error::NonFiniteLikelihood);
                }
                sum += ll;
            }
            *acc += sum / m as f64;
            if global_eval.is_none() {
                *acc -= eval.q.kl_to_isotropic(prior);
            }
            Ok(())
        },
        |a, b| *a += b,
    )?;
    let mut avg = total / points.len() as f64;
    if let Some(eval) = &global_eval {
        avg -= eval.q.kl_to_isotropic(prior) / problem.n() as f64;
    }
    Ok(avg)
}
