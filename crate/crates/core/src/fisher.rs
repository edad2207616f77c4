//! Curvature estimates over η and the preconditioned directions built from them.
//!
//! The predictive Fisher estimate resamples x' from the model at a
//! reparameterized latent and sums outer products of
//! b = ∇_η log p(x' | z(λ); θ), which makes it positive semidefinite by
//! construction. The naive Hessian estimator is kept as a diagnostic.

use crate::error::{check_dim, Error, Result};
use crate::family::FamilyEval;
use crate::linalg::{dampened_solve, SymMatrix};
use crate::params::ParamVector;
use crate::problem::{Batch, ViProblem};
use crate::reduce::ordered_reduce;
use crate::rng::{fill_standard_normal, NoiseContext, NoiseDraw, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    Vpng,
    QFisherPadded,
    NaiveHessian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub matrix: SymMatrix,
    pub mc_samples: usize,
    pub batch: Batch,
    pub kind: FisherKind,
}

impl FisherEstimate {
    /// Identity preconditioner, used to check that preconditioning reduces to the plain gradient.
    pub fn identity(dim: usize, batch: Batch) -> Self {
        Self { matrix: SymMatrix::identity(dim), mc_samples: 1, batch, kind: FisherKind::Vpng }
    }
}

/// One reparameterized latent per entry and the x' drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveItem {
    /// Training-set index of the datapoint.
    pub index: usize,
    pub noise: NoiseDraw,
    pub latent: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    pub items: Vec<PredictiveItem>,
    pub mc_samples: usize,
    /// Latent draws per datapoint (1 in the standard estimator).
    pub latent_draws: usize,
    pub batch: Batch,
}

impl PredictiveBatch {
    /// (n/B) / (M · latent draws)
    pub fn weight(&self) -> f64 {
        self.batch.scale() / (self.mc_samples * self.latent_draws) as f64
    }
}

fn family_eval(problem: &ViProblem, lambda: &[f64], x: &[f64]) -> Result<FamilyEval> {
    problem.family().evaluate(lambda, x)
}

pub fn sample_predictive_batch(problem: &ViProblem, eta: &ParamVector, batch: &Batch, m: usize, ctx: NoiseContext) -> Result<PredictiveBatch> {
    sample_predictive_batch_with(problem, eta, batch, m, 1, ctx)
}

/// As [`sample_predictive_batch`] with `latent_draws` independent ε per datapoint.
pub fn sample_predictive_batch_with(
    problem: &ViProblem,
    eta: &ParamVector,
    batch: &Batch,
    m: usize,
    latent_draws: usize,
    ctx: NoiseContext,
) -> Result<PredictiveBatch> {
    if m == 0 || latent_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    check_dim(problem.dim(), eta.len())?;
    let (lambda, theta) = problem.split(eta.values());
    let model = problem.model();
    let items = ordered_reduce(
        batch.len(),
        Vec::new,
        |acc: &mut Vec<PredictiveItem>, pos| {
            let i = batch.indices[pos];
            let x = &problem.data()[i];
            let eval = family_eval(problem, lambda, x)?;
            let noises = NoiseDraw::sequence(ctx.key(Stream::PredictiveLatent, i as u64), latent_draws, eval.q.dim());
            let mut rng = ctx.key(Stream::PredictiveDraw, i as u64).rng();
            for noise in noises {
                let latent = eval.q.reparameterize(&noise)?;
                let draws = (0..m)
                    .map(|_| model.sample_predictive(x, &latent, theta, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                acc.push(PredictiveItem { index: i, noise, latent, draws });
            }
            Ok(())
        },
        |a, b| a.extend(b),
    )?;
    Ok(PredictiveBatch { items, mc_samples: m, latent_draws, batch: batch.clone() })
}

/// Writes b = ∇_η log p(target | z(λ, ε); θ) into `out` (overwriting it).
pub(crate) fn score_vector(
    problem: &ViProblem,
    lambda: &[f64],
    theta: &[f64],
    eval: &FamilyEval,
    eps: &[f64],
    target: &[f64],
    out: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|v| *v = 0.0);
    let z = eval.q.reparameterize_values(eps);
    let mut gz = vec![0.0; z.len()];
    let (lam_out, theta_out) = out.split_at_mut(lambda.len());
    problem.model().log_lik_grad(target, &z, theta, &mut gz, theta_out)?;
    pullback_latent(problem, lambda, eval, eps, &gz, lam_out);
    Ok(())
}

/// Adds the λ-gradient induced by a latent-space gradient at noise ε.
fn pullback_latent(problem: &ViProblem, lambda: &[f64], eval: &FamilyEval, eps: &[f64], gz: &[f64], out: &mut [f64]) {
    let gs: Vec<f64> = gz.iter().zip(eps).map(|(g, e)| g * e).collect();
    problem.family().pullback(lambda, eval, gz, &gs, out);
}

fn check_psd_finite(m: &SymMatrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient)
    }
}

/// F̂ = (n/B)(1/M) Σ_i Σ_k b_ik b_ikᵀ over a predictive batch.
pub fn estimate_vpng_fisher(problem: &ViProblem, eta: &ParamVector, pred: &PredictiveBatch) -> Result<FisherEstimate> {
    check_dim(problem.dim(), eta.len())?;
    if pred.items.is_empty() {
        return Err(Error::InvalidArgument("predictive batch is empty".into()));
    }
    let (lambda, theta) = problem.split(eta.values());
    let dim = problem.dim();
    let mut matrix = ordered_reduce(
        pred.items.len(),
        || SymMatrix::zeros(dim),
        |acc, j| {
            let item = &pred.items[j];
            let eval = family_eval(problem, lambda, &problem.data()[item.index])?;
            let mut b = vec![0.0; dim];
            for draw in &item.draws {
                score_vector(problem, lambda, theta, &eval, &item.noise.values, draw, &mut b)?;
                acc.add_outer(&b, 1.0);
            }
            Ok(())
        },
        |a, b| a.add_scaled(&b, 1.0).expect("same dim"),
    )?;
    matrix.scale(pred.weight());
    check_psd_finite(&matrix)?;
    Ok(FisherEstimate { matrix, mc_samples: pred.mc_samples, batch: pred.batch.clone(), kind: FisherKind::Vpng })
}

/// The same estimator with the expectation over x' taken in closed form at
/// each sampled latent (Σ_j c_j c_jᵀ from the model's Fisher factors).
pub fn estimate_exact_predictive_fisher(problem: &ViProblem, eta: &ParamVector, pred: &PredictiveBatch) -> Result<FisherEstimate> {
    check_dim(problem.dim(), eta.len())?;
    let (lambda, theta) = problem.split(eta.values());
    let dim = problem.dim();
    let lam_dim = lambda.len();
    let mut matrix = ordered_reduce(
        pred.items.len(),
        || SymMatrix::zeros(dim),
        |acc, j| {
            let item = &pred.items[j];
            let x = &problem.data()[item.index];
            let eval = family_eval(problem, lambda, x)?;
            for c in problem.model().fisher_factors(x, &item.latent, theta)? {
                let mut b = vec![0.0; dim];
                b[lam_dim..].copy_from_slice(&c.grad_theta);
                pullback_latent(problem, lambda, &eval, &item.noise.values, &c.grad_z, &mut b[..lam_dim]);
                acc.add_outer(&b, 1.0);
            }
            Ok(())
        },
        |a, b| a.add_scaled(&b, 1.0).expect("same dim"),
    )?;
    matrix.scale(pred.batch.scale() / pred.latent_draws as f64);
    check_psd_finite(&matrix)?;
    Ok(FisherEstimate { matrix, mc_samples: 0, batch: pred.batch.clone(), kind: FisherKind::Vpng })
}

/// Negative Hessian of the expected log-likelihood with x and z drawn from the
/// model, z mapped to noise by inverting the reparameterization, and the
/// Hessian taken by central differences of the analytic score. Can be indefinite.
pub fn estimate_naive_hessian(problem: &ViProblem, eta: &ParamVector, batch: &Batch, m: usize, ctx: NoiseContext) -> Result<FisherEstimate> {
    check_dim(problem.dim(), eta.len())?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let dim = problem.dim();
    let model = problem.model();
    let values = eta.values();
    let (lambda, theta) = problem.split(values);
    let mut matrix = ordered_reduce(
        batch.len(),
        || vec![0.0; dim * dim],
        |acc, pos| {
            let i = batch.indices[pos];
            let covariates = &problem.data()[i];
            let mut rng = ctx.key(Stream::NaiveHessian, i as u64).rng();
            for _ in 0..m {
                let z = model.sample_prior(&mut rng);
                let x = model.sample_predictive(covariates, &z, theta, &mut rng)?;
                let eps = family_eval(problem, lambda, &x)?.q.invert(&z)?;
                let score_at = |p: &[f64], out: &mut [f64]| -> Result<()> {
                    let (l, t) = problem.split(p);
                    let eval = family_eval(problem, l, &x)?;
                    score_vector(problem, l, t, &eval, &eps, &x, out)
                };
                let mut p = values.to_vec();
                let (mut up, mut down) = (vec![0.0; dim], vec![0.0; dim]);
                for c in 0..dim {
                    let h = 1e-5 * (1.0 + values[c].abs());
                    p[c] = values[c] + h;
                    score_at(&p, &mut up)?;
                    p[c] = values[c] - h;
                    score_at(&p, &mut down)?;
                    p[c] = values[c];
                    for r in 0..dim {
                        acc[r * dim + c] -= (up[r] - down[r]) / (2.0 * h);
                    }
                }
            }
            Ok(())
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    )?;
    let w = batch.scale() / m as f64;
    matrix.iter_mut().for_each(|v| *v *= w);
    let matrix = SymMatrix::from_row_major_symmetrized(dim, &matrix)?;
    Ok(FisherEstimate { matrix, mc_samples: m, batch: batch.clone(), kind: FisherKind::NaiveHessian })
}

/// (F̂ + μI)⁻¹ ∇L
pub fn vpng_direction(f: &FisherEstimate, mu: f64, grad: &ParamVector) -> Result<ParamVector> {
    if f.kind != FisherKind::Vpng {
        return Err(Error::InvalidArgument(format!("expected a predictive Fisher estimate, got {:?}", f.kind)));
    }
    grad.with_values(dampened_solve(&f.matrix, mu, grad.values())?)
}

/// q-Fisher over λ, zero over θ.
pub fn q_fisher_padded(problem: &ViProblem, eta: &ParamVector, batch: &Batch) -> Result<FisherEstimate> {
    let (lambda, _) = problem.split(eta.values());
    let fq = q_fisher_lambda(problem, lambda, batch)?;
    let mut matrix = SymMatrix::zeros(problem.dim());
    for i in 0..lambda.len() {
        for j in 0..lambda.len() {
            matrix.set(i, j, fq.get(i, j));
        }
    }
    Ok(FisherEstimate { matrix, mc_samples: 0, batch: batch.clone(), kind: FisherKind::QFisherPadded })
}

fn q_fisher_lambda(problem: &ViProblem, lambda: &[f64], batch: &Batch) -> Result<SymMatrix> {
    let xs: Vec<&[f64]> = batch.indices.iter().map(|&i| problem.data()[i].as_slice()).collect();
    problem.family().q_fisher_lambda(lambda, &xs, batch.scale())
}

/// λ block preconditioned by the q-Fisher, θ block left as the plain gradient.
pub fn q_natural_direction(problem: &ViProblem, eta: &ParamVector, batch: &Batch, mu: f64, grad: &ParamVector) -> Result<ParamVector> {
    check_dim(problem.dim(), grad.len())?;
    let (lambda, _) = problem.split(eta.values());
    let fq = q_fisher_lambda(problem, lambda, batch)?;
    let lam = problem.lambda_range();
    let mut out = grad.values().to_vec();
    out[lam.clone()].copy_from_slice(&dampened_solve(&fq, mu, &grad.values()[lam])?);
    grad.with_values(out)
}

/// Both sides of E_ε[KL_sym(p(x'|η) ‖ p(x'|η+Δ))] ≈ Δᵀ F_r Δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlQuadraticCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of `lhs` over the noise draws.
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
}

/// Averages, over `n_eps` noise draws per datapoint, the symmetric KL between
/// predictive distributions at η and η + Δ (lhs) and the quadratic form of the
/// closed-form predictive Fisher at the same latents (rhs).
pub fn symmetric_kl_quadratic_check(
    problem: &ViProblem,
    eta: &ParamVector,
    delta: &[f64],
    batch: &Batch,
    n_eps: usize,
    ctx: NoiseContext,
) -> Result<KlQuadraticCheck> {
    check_dim(problem.dim(), eta.len())?;
    check_dim(problem.dim(), delta.len())?;
    if n_eps == 0 {
        return Err(Error::InvalidArgument("need at least one noise draw".into()));
    }
    let values = eta.values();
    let moved: Vec<f64> = values.iter().zip(delta).map(|(a, b)| a + b).collect();
    let (lambda, theta) = problem.split(values);
    let (lambda_b, theta_b) = problem.split(&moved);
    let lam_dim = lambda.len();
    let model = problem.model();
    let dim = problem.dim();
    let sums = ordered_reduce(
        batch.len(),
        || vec![0.0; 2 * n_eps],
        |acc, pos| {
            let i = batch.indices[pos];
            let x = &problem.data()[i];
            let eval_a = family_eval(problem, lambda, x)?;
            let eval_b = family_eval(problem, lambda_b, x)?;
            let mut rng = ctx.key(Stream::KlCheck, i as u64).rng();
            let mut eps = vec![0.0; eval_a.q.dim()];
            for e in 0..n_eps {
                fill_standard_normal(&mut rng, &mut eps);
                let za = eval_a.q.reparameterize_values(&eps);
                let zb = eval_b.q.reparameterize_values(&eps);
                acc[e] += model.predictive_sym_kl(x, &za, theta, &zb, theta_b)?;
                let mut quad = 0.0;
                for c in model.fisher_factors(x, &za, theta)? {
                    let mut b = vec![0.0; dim];
                    b[lam_dim..].copy_from_slice(&c.grad_theta);
                    pullback_latent(problem, lambda, &eval_a, &eps, &c.grad_z, &mut b[..lam_dim]);
                    let proj: f64 = b.iter().zip(delta).map(|(u, v)| u * v).sum();
                    quad += proj * proj;
                }
                acc[n_eps + e] += quad;
            }
            Ok(())
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    )?;
    let scale = batch.scale();
    let stats = |s: &[f64]| {
        let vals: Vec<f64> = s.iter().map(|v| v * scale).collect();
        let mean = vals.iter().sum::<f64>() / n_eps as f64;
        let var = if n_eps > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_eps - 1) as f64 } else { 0.0 };
        (mean, (var / n_eps as f64).sqrt())
    };
    let (lhs, lhs_stderr) = stats(&sums[..n_eps]);
    let (rhs, rhs_stderr) = stats(&sums[n_eps..]);
    Ok(KlQuadraticCheck { lhs, rhs, lhs_stderr, rhs_stderr })
}
