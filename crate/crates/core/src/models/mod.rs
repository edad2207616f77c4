//! Latent-variable models p(z) p(x | z; θ).

mod logreg;
mod network;
mod scalar;
mod toy;

use std::fmt;

use crate::error::Result;
use crate::rng::fill_standard_normal;

pub use logreg::LogisticRegressionModel;
pub use network::{mini_vae_model, poisson_mf_model, GenerativeNetwork, NetworkModel, OutputLikelihood};
pub use scalar::{counterexample_hessian, ScalarLinearGaussianModel};
pub use toy::{toy_elbo_gradient, toy_posterior, ToyGaussianModel};

/// log p(x | z; θ) with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LikGrad {
    pub value: f64,
    pub grad_z: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

pub trait LatentModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn latent_dim(&self) -> usize;
    /// Length of one observation vector.
    fn data_dim(&self) -> usize;
    /// Names and lengths of the θ blocks, in layout order. Empty when θ is absent.
    fn theta_blocks(&self) -> Vec<(String, usize)>;

    fn theta_dim(&self) -> usize {
        self.theta_blocks().iter().map(|(_, n)| n).sum()
    }

    /// The prior is N(0, σ₀² I).
    fn prior_stddev(&self) -> f64 {
        1.0
    }

    fn log_prior(&self, z: &[f64]) -> f64 {
        let s = self.prior_stddev();
        let ln_norm = 0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln();
        z.iter().map(|v| -0.5 * (v / s) * (v / s) - ln_norm).sum()
    }

    fn sample_prior(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut z = vec![0.0; self.latent_dim()];
        fill_standard_normal(rng, &mut z);
        let s = self.prior_stddev();
        z.iter_mut().for_each(|v| *v *= s);
        z
    }

    fn log_lik(&self, x: &[f64], z: &[f64], theta: &[f64]) -> Result<f64>;

    /// Adds ∇_z and ∇_θ of log p(x | z; θ) into the buffers and returns its value.
    fn log_lik_grad(&self, x: &[f64], z: &[f64], theta: &[f64], grad_z: &mut [f64], grad_theta: &mut [f64]) -> Result<f64>;

    fn grad_log_lik(&self, x: &[f64], z: &[f64], theta: &[f64]) -> Result<LikGrad> {
        let mut grad_z = vec![0.0; self.latent_dim()];
        let mut grad_theta = vec![0.0; self.theta_dim()];
        let value = self.log_lik_grad(x, z, theta, &mut grad_z, &mut grad_theta)?;
        Ok(LikGrad { value, grad_z, grad_theta })
    }

    /// Draws x' ~ p(· | z; θ). Covariates that the model conditions on are copied from `x`.
    fn sample_predictive(&self, x: &[f64], z: &[f64], theta: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;

    /// KL(p(·|z_a;θ_a) ‖ p(·|z_b;θ_b)) + KL(p(·|z_b;θ_b) ‖ p(·|z_a;θ_a)).
    fn predictive_sym_kl(&self, x: &[f64], z_a: &[f64], theta_a: &[f64], z_b: &[f64], theta_b: &[f64]) -> Result<f64>;

    /// Vectors c_j (as gradients over z and θ) with Σ_j c_j c_jᵀ equal to the
    /// Fisher information of p(x' | z; θ) with respect to (z, θ).
    fn fisher_factors(&self, x: &[f64], z: &[f64], theta: &[f64]) -> Result<Vec<LikGrad>>;

    fn init_theta(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    /// Layer structure of the likelihood, when it is a feed-forward network of z.
    fn network(&self) -> Option<&GenerativeNetwork> {
        None
    }
}

/// log(1 + eᵗ) without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// ln softplus(t), accurate for very negative t.
pub fn ln_softplus(t: f64) -> f64 {
    if t < -30.0 {
        t
    } else {
        softplus(t).ln()
    }
}

/// sigmoid(t) / softplus(t), accurate for very negative t.
pub fn sigmoid_over_softplus(t: f64) -> f64 {
    if t < -30.0 {
        1.0
    } else {
        sigmoid(t) / softplus(t)
    }
}

/// Central-difference gradient of a scalar function, used by tests and checks.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            let h = step * (1.0 + orig.abs());
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
