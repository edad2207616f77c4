//! Two-dimensional Gaussian with a nearly singular known covariance,
//! x_i ~ N(μ, Σ), Σ = [[1, 1−ε], [1−ε, 1]], μ ~ N(0, I).

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dampened_solve, SymMatrix};
use crate::models::{LatentModel, LikGrad};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGaussianModel {
    eps_corr: f64,
    data: Vec<[f64; 2]>,
    /// Σ⁻¹, absent when Σ is singular.
    precision: Option<[[f64; 2]; 2]>,
    /// Lower Cholesky factor of Σ.
    chol: Option<[[f64; 2]; 2]>,
}

impl ToyGaussianModel {
    /// `eps_corr` must lie in [0, 2); Σ is singular at 0, which only the
    /// posterior and likelihood operations reject.
    pub fn new(eps_corr: f64, data: Vec<[f64; 2]>) -> Result<Self> {
        if !(0.0..2.0).contains(&eps_corr) {
            return Err(Error::InvalidArgument(format!("eps_corr must be in [0, 2), got {eps_corr}")));
        }
        let rho = 1.0 - eps_corr;
        let det = 1.0 - rho * rho;
        let (precision, chol) = if det > 0.0 {
            let p = [[1.0 / det, -rho / det], [-rho / det, 1.0 / det]];
            let l = [[1.0, 0.0], [rho, det.sqrt()]];
            (Some(p), Some(l))
        } else {
            (None, None)
        };
        Ok(Self { eps_corr, data, precision, chol })
    }

    pub fn eps_corr(&self) -> f64 {
        self.eps_corr
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn covariance(&self) -> SymMatrix {
        let rho = 1.0 - self.eps_corr;
        SymMatrix::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]).expect("symmetric")
    }

    pub fn precision(&self) -> Result<SymMatrix> {
        let p = self.precision.ok_or(Error::SingularCovariance)?;
        Ok(SymMatrix::from_rows(&[p[0].to_vec(), p[1].to_vec()]).expect("symmetric"))
    }

    /// The exact predictive Fisher n Σ⁻¹ for a global mean latent.
    pub fn exact_fisher(&self) -> Result<SymMatrix> {
        Ok(self.precision()?.scaled(self.n() as f64))
    }

    pub fn data_sum(&self) -> [f64; 2] {
        self.data.iter().fold([0.0, 0.0], |acc, x| [acc[0] + x[0], acc[1] + x[1]])
    }

    fn prec(&self) -> Result<[[f64; 2]; 2]> {
        self.precision.ok_or(Error::SingularCovariance)
    }

    fn prec_apply(p: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
        [p[0][0] * v[0] + p[0][1] * v[1], p[1][0] * v[0] + p[1][1] * v[1]]
    }

    /// Closed-form ELBO for q = N(λ, σ² I): Σ_i [log N(x_i | λ, Σ) − σ² tr(Σ⁻¹)/2] − KL(q ‖ N(0, I)).
    pub fn analytic_elbo(&self, lambda: &[f64], sigma_q: f64) -> Result<f64> {
        check_dim(2, lambda.len())?;
        let p = self.prec()?;
        let tr = p[0][0] + p[1][1];
        let mut total = 0.0;
        for x in &self.data {
            total += self.log_lik(x, lambda, &[])? - 0.5 * sigma_q * sigma_q * tr;
        }
        let s2 = sigma_q * sigma_q;
        let kl = 0.5 * (lambda[0] * lambda[0] + lambda[1] * lambda[1]) + (s2 - 1.0 - s2.ln());
        Ok(total - kl)
    }

    /// log p(x_{1:n}), from Bayes' rule evaluated at the posterior mean.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let (mean, cov) = toy_posterior(self)?;
        let mut lp = 0.0;
        for x in &self.data {
            lp += self.log_lik(x, &mean, &[])?;
        }
        let prior = -LN_2PI - 0.5 * (mean[0] * mean[0] + mean[1] * mean[1]);
        // log N(m | m, Σ') = −ln 2π − ½ ln det Σ'.
        let det = cov.get(0, 0) * cov.get(1, 1) - cov.get(0, 1) * cov.get(1, 0);
        let post = -LN_2PI - 0.5 * det.ln();
        Ok(lp + prior - post)
    }
}

/// (μ', Σ') = ((nI + Σ)⁻¹ Σ x_i, (nΣ⁻¹ + I)⁻¹).
pub fn toy_posterior(model: &ToyGaussianModel) -> Result<(Vec<f64>, SymMatrix)> {
    let mut prec_post = model.precision()?.scaled(model.n() as f64);
    prec_post.add_diagonal(1.0);
    let det = prec_post.get(0, 0) * prec_post.get(1, 1) - prec_post.get(0, 1).powi(2);
    let cov = SymMatrix::from_rows(&[
        vec![prec_post.get(1, 1) / det, -prec_post.get(0, 1) / det],
        vec![-prec_post.get(0, 1) / det, prec_post.get(0, 0) / det],
    ])?;
    let mean = dampened_solve(&model.covariance(), model.n() as f64, &model.data_sum())?;
    Ok((mean, cov))
}

/// −λ + Σ⁻¹(−nλ + Σ x_i).
pub fn toy_elbo_gradient(model: &ToyGaussianModel, lambda: &[f64]) -> Result<Vec<f64>> {
    check_dim(2, lambda.len())?;
    let p = model.prec()?;
    let n = model.n() as f64;
    let s = model.data_sum();
    let inner = ToyGaussianModel::prec_apply(&p, [s[0] - n * lambda[0], s[1] - n * lambda[1]]);
    Ok(vec![inner[0] - lambda[0], inner[1] - lambda[1]])
}

impl LatentModel for ToyGaussianModel {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_dim(&self) -> usize {
        2
    }

    fn data_dim(&self) -> usize {
        2
    }

    fn theta_blocks(&self) -> Vec<(String, usize)> {
        Vec::new()
    }

    fn log_lik(&self, x: &[f64], z: &[f64], _theta: &[f64]) -> Result<f64> {
        check_dim(2, x.len())?;
        check_dim(2, z.len())?;
        let p = self.prec()?;
        let d = [x[0] - z[0], x[1] - z[1]];
        let pd = Self::prec_apply(&p, d);
        let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        Ok(-LN_2PI + 0.5 * det.ln() - 0.5 * (d[0] * pd[0] + d[1] * pd[1]))
    }

    fn log_lik_grad(&self, x: &[f64], z: &[f64], theta: &[f64], grad_z: &mut [f64], _grad_theta: &mut [f64]) -> Result<f64> {
        let value = self.log_lik(x, z, theta)?;
        let p = self.prec()?;
        let g = Self::prec_apply(&p, [x[0] - z[0], x[1] - z[1]]);
        grad_z[0] += g[0];
        grad_z[1] += g[1];
        Ok(value)
    }

    fn sample_predictive(&self, _x: &[f64], z: &[f64], _theta: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        check_dim(2, z.len())?;
        let l = self.chol.ok_or(Error::SingularCovariance)?;
        let mut xi = [0.0; 2];
        crate::rng::fill_standard_normal(rng, &mut xi);
        Ok(vec![z[0] + l[0][0] * xi[0], z[1] + l[1][0] * xi[0] + l[1][1] * xi[1]])
    }

    fn predictive_sym_kl(&self, _x: &[f64], z_a: &[f64], _ta: &[f64], z_b: &[f64], _tb: &[f64]) -> Result<f64> {
        let p = self.prec()?;
        let d = [z_a[0] - z_b[0], z_a[1] - z_b[1]];
        let pd = Self::prec_apply(&p, d);
        Ok(d[0] * pd[0] + d[1] * pd[1])
    }

    fn fisher_factors(&self, _x: &[f64], _z: &[f64], _theta: &[f64]) -> Result<Vec<LikGrad>> {
        // Σ⁻¹ = L⁻ᵀ L⁻¹, so the rows of L⁻¹ are the factors.
        let l = self.chol.ok_or(Error::SingularCovariance)?;
        let inv = [[1.0 / l[0][0], 0.0], [-l[1][0] / (l[0][0] * l[1][1]), 1.0 / l[1][1]]];
        Ok(inv
            .iter()
            .map(|row| LikGrad { value: 0.0, grad_z: row.to_vec(), grad_theta: Vec::new() })
            .collect())
    }

    fn init_theta(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::finite_difference_gradient;
    use crate::rng::{NoiseKey, Stream};

    fn synthetic(n: usize, eps: f64) -> ToyGaussianModel {
        let probe = ToyGaussianModel::new(eps, vec![]).unwrap();
        let mut rng = NoiseKey::new(5, Stream::Data, 0, 0).rng();
        let data = (0..n)
            .map(|_| {
                let x = probe.sample_predictive(&[], &[1.0, 0.8], &[], &mut rng).unwrap();
                [x[0], x[1]]
            })
            .collect();
        ToyGaussianModel::new(eps, data).unwrap()
    }

    #[test]
    fn posterior_without_data_is_prior() {
        let m = ToyGaussianModel::new(0.01, vec![]).unwrap();
        let (mean, cov) = toy_posterior(&m).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert!(cov.max_abs_diff(&SymMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let m = ToyGaussianModel::new(0.0, vec![[1.0, 1.0]]).unwrap();
        assert_eq!(toy_posterior(&m).unwrap_err(), Error::SingularCovariance);
        assert_eq!(toy_elbo_gradient(&m, &[0.0, 0.0]).unwrap_err(), Error::SingularCovariance);
    }

    #[test]
    fn posterior_matches_sequential_conjugate_updates() {
        let m = synthetic(100, 0.01);
        // One Bayesian update per observation in information form.
        let p = m.precision().unwrap();
        let mut info = [[1.0, 0.0], [0.0, 1.0]];
        let mut h = [0.0, 0.0];
        for x in m.data() {
            for i in 0..2 {
                for j in 0..2 {
                    info[i][j] += p.get(i, j);
                }
                h[i] += p.get(i, 0) * x[0] + p.get(i, 1) * x[1];
            }
        }
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        let cov = [[info[1][1] / det, -info[0][1] / det], [-info[1][0] / det, info[0][0] / det]];
        let mean = [cov[0][0] * h[0] + cov[0][1] * h[1], cov[1][0] * h[0] + cov[1][1] * h[1]];
        let (pm, pc) = toy_posterior(&m).unwrap();
        for i in 0..2 {
            assert!((pm[i] - mean[i]).abs() < 1e-10, "{} vs {}", pm[i], mean[i]);
            for j in 0..2 {
                assert!((pc.get(i, j) - cov[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_posterior_mean() {
        let m = synthetic(100, 0.01);
        let (mean, _) = toy_posterior(&m).unwrap();
        let g = toy_elbo_gradient(&m, &mean).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9), "{g:?}");
        let empty = ToyGaussianModel::new(0.01, vec![]).unwrap();
        assert_eq!(toy_elbo_gradient(&empty, &[1.0, 1.0]).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn gradient_matches_analytic_elbo_differences() {
        let m = synthetic(100, 0.01);
        for lambda in [[0.0, 0.0], [0.5, -0.3], [1.2, 0.9]] {
            let fd = finite_difference_gradient(|l| m.analytic_elbo(l, 0.1).unwrap(), &lambda, 1e-6);
            let g = toy_elbo_gradient(&m, &lambda).unwrap();
            for (a, b) in fd.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn elbo_below_marginal_likelihood() {
        let m = synthetic(50, 0.05);
        let (mean, _) = toy_posterior(&m).unwrap();
        let lml = m.log_marginal_likelihood().unwrap();
        for s in [0.01, 0.1, 0.5] {
            assert!(m.analytic_elbo(&mean, s).unwrap() <= lml);
        }
    }

    #[test]
    fn fisher_factors_rebuild_precision() {
        let m = ToyGaussianModel::new(0.01, vec![]).unwrap();
        let mut f = SymMatrix::zeros(2);
        for c in m.fisher_factors(&[], &[0.0, 0.0], &[]).unwrap() {
            f.add_outer(&c.grad_z, 1.0);
        }
        assert!(f.max_abs_diff(&m.precision().unwrap()) < 1e-9 * 100.0);
    }
}
