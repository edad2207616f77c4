//! Bayesian logistic regression with weights as the (global) latent.
//!
//! An observation is `[x_1, …, x_d, y]` with y ∈ {0, 1}. Predictive sampling
//! redraws y and keeps the covariates.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::models::{sigmoid, softplus, LatentModel, LikGrad};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegressionModel {
    n_features: usize,
    bias: bool,
    prior_stddev: f64,
}

impl LogisticRegressionModel {
    pub fn new(n_features: usize, bias: bool, prior_stddev: f64) -> Result<Self> {
        if !(prior_stddev > 0.0) {
            return Err(Error::InvalidArgument(format!("prior stddev must be positive, got {prior_stddev}")));
        }
        Ok(Self { n_features, bias, prior_stddev })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// ⟨w, (x, 1)⟩, or ⟨w, x⟩ without bias.
    pub fn logit(&self, x: &[f64], w: &[f64]) -> f64 {
        let mut t: f64 = w[..self.n_features].iter().zip(x).map(|(a, b)| a * b).sum();
        if self.bias {
            t += w[self.n_features];
        }
        t
    }

    fn check(&self, x: &[f64], z: &[f64]) -> Result<()> {
        check_dim(self.n_features + 1, x.len())?;
        check_dim(self.latent_dim(), z.len())
    }

    fn add_features(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(&x[..self.n_features]) {
            *o += weight * xi;
        }
        if self.bias {
            out[self.n_features] += weight;
        }
    }
}

impl LatentModel for LogisticRegressionModel {
    fn name(&self) -> &str {
        "logreg"
    }

    fn latent_dim(&self) -> usize {
        self.n_features + usize::from(self.bias)
    }

    fn data_dim(&self) -> usize {
        self.n_features + 1
    }

    fn theta_blocks(&self) -> Vec<(String, usize)> {
        Vec::new()
    }

    fn prior_stddev(&self) -> f64 {
        self.prior_stddev
    }

    fn log_lik(&self, x: &[f64], z: &[f64], _theta: &[f64]) -> Result<f64> {
        self.check(x, z)?;
        let t = self.logit(x, z);
        Ok(x[self.n_features] * t - softplus(t))
    }

    fn log_lik_grad(&self, x: &[f64], z: &[f64], _theta: &[f64], grad_z: &mut [f64], _grad_theta: &mut [f64]) -> Result<f64> {
        self.check(x, z)?;
        let t = self.logit(x, z);
        let y = x[self.n_features];
        self.add_features(x, y - sigmoid(t), grad_z);
        Ok(y * t - softplus(t))
    }

    fn sample_predictive(&self, x: &[f64], z: &[f64], _theta: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        self.check(x, z)?;
        let p = sigmoid(self.logit(x, z));
        let mut out = x.to_vec();
        out[self.n_features] = f64::from(u8::from(rng.random::<f64>() < p));
        Ok(out)
    }

    fn predictive_sym_kl(&self, x: &[f64], z_a: &[f64], _ta: &[f64], z_b: &[f64], _tb: &[f64]) -> Result<f64> {
        let (ta, tb) = (self.logit(x, z_a), self.logit(x, z_b));
        Ok((sigmoid(ta) - sigmoid(tb)) * (ta - tb))
    }

    fn fisher_factors(&self, x: &[f64], z: &[f64], _theta: &[f64]) -> Result<Vec<LikGrad>> {
        self.check(x, z)?;
        let p = sigmoid(self.logit(x, z));
        let mut grad_z = vec![0.0; self.latent_dim()];
        self.add_features(x, (p * (1.0 - p)).sqrt(), &mut grad_z);
        Ok(vec![LikGrad { value: 0.0, grad_z, grad_theta: Vec::new() }])
    }

    fn init_theta(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        Vec::new()
    }
}
