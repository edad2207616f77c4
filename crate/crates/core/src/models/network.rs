//! Likelihoods given by a feed-forward network of the latent: the mini-VAE
//! decoder (Bernoulli pixels) and Poisson matrix factorization (a single
//! bias-free layer with a softplus rate).

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{check_dim, Error, Result};
use crate::models::{ln_softplus, sigmoid, sigmoid_over_softplus, softplus, LatentModel, LikGrad};
use crate::nn::{Activation, Mlp, MlpCache};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Per-output observation model on the network's final pre-activations t.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLikelihood {
    /// x ∈ {0, 1}, p = sigmoid(t).
    Bernoulli,
    /// x ∈ ℕ, rate = softplus(t).
    PoissonSoftplus,
    /// x ∈ ℝ, N(t, 1).
    GaussianUnit,
}

impl OutputLikelihood {
    fn validate(self, x: f64) -> Result<()> {
        match self {
            Self::PoissonSoftplus if !(x >= 0.0 && x.fract() == 0.0) => Err(Error::NonIntegerRating { value: x }),
            _ => Ok(()),
        }
    }

    pub fn log_prob(self, x: f64, t: f64) -> f64 {
        match self {
            Self::Bernoulli => x * t - softplus(t),
            Self::PoissonSoftplus => {
                let ln_fact: f64 = (2..=x as u64).map(|k| (k as f64).ln()).sum();
                let term = if x == 0.0 { 0.0 } else { x * ln_softplus(t) };
                term - softplus(t) - ln_fact
            }
            Self::GaussianUnit => -0.5 * (x - t) * (x - t) - HALF_LN_2PI,
        }
    }

    /// ∂ log p(x | t) / ∂t
    pub fn grad(self, x: f64, t: f64) -> f64 {
        match self {
            Self::Bernoulli => x - sigmoid(t),
            Self::PoissonSoftplus => x * sigmoid_over_softplus(t) - sigmoid(t),
            Self::GaussianUnit => x - t,
        }
    }

    /// Fisher information of the output distribution with respect to t.
    pub fn fisher(self, t: f64) -> f64 {
        match self {
            Self::Bernoulli => {
                let p = sigmoid(t);
                p * (1.0 - p)
            }
            Self::PoissonSoftplus => sigmoid(t) * sigmoid_over_softplus(t),
            Self::GaussianUnit => 1.0,
        }
    }

    /// Fails with `NonFiniteLikelihood` when t is so large that the output
    /// distribution cannot be sampled.
    pub fn sample<R: Rng + ?Sized>(self, t: f64, rng: &mut R) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::NonFiniteLikelihood);
        }
        Ok(match self {
            Self::Bernoulli => f64::from(u8::from(rng.random::<f64>() < sigmoid(t))),
            Self::PoissonSoftplus => {
                let rate = softplus(t);
                if rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).map_err(|_| Error::NonFiniteLikelihood)?.sample(rng)
                }
            }
            Self::GaussianUnit => t + <rand_distr::StandardNormal as Distribution<f64>>::sample(&rand_distr::StandardNormal, rng),
        })
    }

    /// Symmetric KL between the outputs at t_a and t_b: (mean_a − mean_b)(natural_a − natural_b).
    pub fn sym_kl(self, ta: f64, tb: f64) -> f64 {
        match self {
            Self::Bernoulli => (sigmoid(ta) - sigmoid(tb)) * (ta - tb),
            Self::PoissonSoftplus => (softplus(ta) - softplus(tb)) * (ln_softplus(ta) - ln_softplus(tb)),
            Self::GaussianUnit => (ta - tb) * (ta - tb),
        }
    }
}

/// An MLP z ↦ t with a per-output likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeNetwork {
    pub mlp: Mlp,
    pub likelihood: OutputLikelihood,
}

impl GenerativeNetwork {
    pub fn forward(&self, z: &[f64], theta: &[f64], cache: &mut MlpCache) -> Result<()> {
        self.mlp.forward(theta, z, cache)
    }

    pub fn log_prob(&self, x: &[f64], out: &[f64]) -> Result<f64> {
        check_dim(out.len(), x.len())?;
        let mut total = 0.0;
        for (&xi, &ti) in x.iter().zip(out) {
            self.likelihood.validate(xi)?;
            total += self.likelihood.log_prob(xi, ti);
        }
        Ok(total)
    }

    /// ∂ log p(x | t) / ∂t for every output.
    pub fn output_grad(&self, x: &[f64], out: &[f64]) -> Vec<f64> {
        x.iter().zip(out).map(|(&xi, &ti)| self.likelihood.grad(xi, ti)).collect()
    }

    pub fn sample(&self, out: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        out.iter().map(|&t| self.likelihood.sample(t, rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    name: String,
    latent_dim: usize,
    net: GenerativeNetwork,
}

impl NetworkModel {
    pub fn new(name: impl Into<String>, mlp: Mlp, likelihood: OutputLikelihood) -> Self {
        let latent_dim = mlp.input_dim();
        Self { name: name.into(), latent_dim, net: GenerativeNetwork { mlp, likelihood } }
    }

    pub fn generative(&self) -> &GenerativeNetwork {
        &self.net
    }

    fn out(&self, z: &[f64], theta: &[f64], cache: &mut MlpCache) -> Result<()> {
        check_dim(self.latent_dim, z.len())?;
        self.net.forward(z, theta, cache)
    }
}

/// Decoder latent → hidden → hidden → pixels with tanh units and Bernoulli pixels.
pub fn mini_vae_model(pixels: usize, latent_dim: usize, hidden: usize) -> Result<NetworkModel> {
    let mlp = Mlp::tanh_stack(&[latent_dim, hidden, hidden, pixels], true)?;
    Ok(NetworkModel::new("vae", mlp, OutputLikelihood::Bernoulli))
}

/// Rate softplus(θ β_u) for each movie, θ being the n_movies × latent_dim factor matrix.
pub fn poisson_mf_model(n_movies: usize, latent_dim: usize) -> Result<NetworkModel> {
    let mlp = Mlp::new(&[(latent_dim, n_movies, false, Activation::Identity)])?;
    Ok(NetworkModel::new("poisson", mlp, OutputLikelihood::PoissonSoftplus))
}

impl LatentModel for NetworkModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn data_dim(&self) -> usize {
        self.net.mlp.output_dim()
    }

    fn theta_blocks(&self) -> Vec<(String, usize)> {
        self.net
            .mlp
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("decoder.{i}"), l.param_count()))
            .collect()
    }

    fn log_lik(&self, x: &[f64], z: &[f64], theta: &[f64]) -> Result<f64> {
        let mut cache = MlpCache::default();
        self.out(z, theta, &mut cache)?;
        self.net.log_prob(x, cache.output())
    }

    fn log_lik_grad(&self, x: &[f64], z: &[f64], theta: &[f64], grad_z: &mut [f64], grad_theta: &mut [f64]) -> Result<f64> {
        let mut cache = MlpCache::default();
        self.out(z, theta, &mut cache)?;
        let value = self.net.log_prob(x, cache.output())?;
        let g = self.net.output_grad(x, cache.output());
        let gz = self.net.mlp.backward(theta, &cache, &g, Some(grad_theta), |_, _| {});
        for (a, b) in grad_z.iter_mut().zip(&gz) {
            *a += b;
        }
        Ok(value)
    }

    fn sample_predictive(&self, _x: &[f64], z: &[f64], theta: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let mut cache = MlpCache::default();
        self.out(z, theta, &mut cache)?;
        self.net.sample(cache.output(), rng)
    }

    fn predictive_sym_kl(&self, _x: &[f64], z_a: &[f64], theta_a: &[f64], z_b: &[f64], theta_b: &[f64]) -> Result<f64> {
        let (mut ca, mut cb) = (MlpCache::default(), MlpCache::default());
        self.out(z_a, theta_a, &mut ca)?;
        self.out(z_b, theta_b, &mut cb)?;
        Ok(ca.output().iter().zip(cb.output()).map(|(&a, &b)| self.net.likelihood.sym_kl(a, b)).sum())
    }

    fn fisher_factors(&self, _x: &[f64], z: &[f64], theta: &[f64]) -> Result<Vec<LikGrad>> {
        let mut cache = MlpCache::default();
        self.out(z, theta, &mut cache)?;
        let out = cache.output().to_vec();
        let mut factors = Vec::with_capacity(out.len());
        for (j, &t) in out.iter().enumerate() {
            let mut e = vec![0.0; out.len()];
            e[j] = self.net.likelihood.fisher(t).sqrt();
            let mut grad_theta = vec![0.0; theta.len()];
            let grad_z = self.net.mlp.backward(theta, &cache, &e, Some(&mut grad_theta), |_, _| {});
            factors.push(LikGrad { value: 0.0, grad_z, grad_theta });
        }
        Ok(factors)
    }

    fn init_theta(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut t = vec![0.0; self.net.mlp.param_count()];
        self.net.mlp.init_params(rng, &mut t);
        t
    }

    fn network(&self) -> Option<&GenerativeNetwork> {
        Some(&self.net)
    }
}
