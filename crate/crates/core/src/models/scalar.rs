//! z_i ~ N(0, 1), x_i ~ N(θ z_i, 1): the smallest model on which the naive
//! Hessian of the expected log-likelihood fails to be positive semidefinite.

use crate::error::{check_dim, Result};
use crate::linalg::SymMatrix;
use crate::models::{LatentModel, LikGrad};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalarLinearGaussianModel {
    init_theta: f64,
}

impl ScalarLinearGaussianModel {
    pub fn new(init_theta: f64) -> Self {
        Self { init_theta }
    }
}

/// n·[[θ²(θ²+1), θ²−1], [θ²−1, 1]]: the expected negative Hessian of the
/// reparameterized log-likelihood in (λ, θ) when q(z|x) = N(λx, σ²) and x, z
/// come from the model.
pub fn counterexample_hessian(theta: f64, n: usize) -> SymMatrix {
    let t2 = theta * theta;
    let n = n as f64;
    SymMatrix::from_rows(&[vec![n * t2 * (t2 + 1.0), n * (t2 - 1.0)], vec![n * (t2 - 1.0), n]]).expect("symmetric")
}

impl LatentModel for ScalarLinearGaussianModel {
    fn name(&self) -> &str {
        "scalar"
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn data_dim(&self) -> usize {
        1
    }

    fn theta_blocks(&self) -> Vec<(String, usize)> {
        vec![("theta".to_string(), 1)]
    }

    fn log_lik(&self, x: &[f64], z: &[f64], theta: &[f64]) -> Result<f64> {
        check_dim(1, x.len())?;
        check_dim(1, z.len())?;
        check_dim(1, theta.len())?;
        let r = x[0] - theta[0] * z[0];
        Ok(-0.5 * r * r - HALF_LN_2PI)
    }

    fn log_lik_grad(&self, x: &[f64], z: &[f64], theta: &[f64], grad_z: &mut [f64], grad_theta: &mut [f64]) -> Result<f64> {
        let value = self.log_lik(x, z, theta)?;
        let r = x[0] - theta[0] * z[0];
        grad_z[0] += r * theta[0];
        grad_theta[0] += r * z[0];
        Ok(value)
    }

    fn sample_predictive(&self, _x: &[f64], z: &[f64], theta: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let mut xi = [0.0];
        crate::rng::fill_standard_normal(rng, &mut xi);
        Ok(vec![theta[0] * z[0] + xi[0]])
    }

    fn predictive_sym_kl(&self, _x: &[f64], z_a: &[f64], ta: &[f64], z_b: &[f64], tb: &[f64]) -> Result<f64> {
        let d = ta[0] * z_a[0] - tb[0] * z_b[0];
        Ok(d * d)
    }

    fn fisher_factors(&self, _x: &[f64], z: &[f64], theta: &[f64]) -> Result<Vec<LikGrad>> {
        Ok(vec![LikGrad { value: 0.0, grad_z: vec![theta[0]], grad_theta: vec![z[0]] }])
    }

    fn init_theta(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![self.init_theta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;

    #[test]
    fn hessian_examples() {
        assert!(counterexample_hessian(1.0, 1).max_abs_diff(&SymMatrix::from_diagonal(&[2.0, 1.0])) < 1e-15);
        let h = counterexample_hessian(0.5, 1);
        let want = SymMatrix::from_rows(&[vec![0.3125, -0.75], vec![-0.75, 1.0]]).unwrap();
        assert!(h.max_abs_diff(&want) < 1e-15);
        assert!(min_eigenvalue(&h) < 0.0);
        let b = counterexample_hessian(1.0 / 3f64.sqrt(), 1);
        assert!(min_eigenvalue(&b).abs() < 1e-9);
    }

    #[test]
    fn indefinite_exactly_below_threshold() {
        for k in 0..=10 {
            let theta = k as f64 / 10.0;
            let neg = min_eigenvalue(&counterexample_hessian(theta, 7)) < 0.0;
            assert_eq!(neg, theta < 1.0 / 3f64.sqrt(), "theta {theta}");
        }
    }
}
