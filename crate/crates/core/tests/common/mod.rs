#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vpng_core::family::{EncoderFamily, GlobalGaussian, InputTransform, LinearAmortized};
use vpng_core::models::{mini_vae_model, poisson_mf_model, LogisticRegressionModel, ScalarLinearGaussianModel, ToyGaussianModel};
use vpng_core::ViProblem;

pub const TOY_N: usize = 100;
pub const TOY_EPS: f64 = 0.01;
pub const TOY_SIGMA_Q: f64 = 0.1;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// n draws from N((1, 0.8), Σ) with Σ = [[1, 1−ε], [1−ε, 1]].
pub fn toy_data(n: usize, eps: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 1.0 - eps;
    let l21 = c;
    let l22 = (1.0 - c * c).sqrt();
    (0..n)
        .map(|_| {
            let (a, b) = (normal(&mut rng), normal(&mut rng));
            [1.0 + a, 0.8 + l21 * a + l22 * b]
        })
        .collect()
}

pub fn toy_model(seed: u64) -> ToyGaussianModel {
    ToyGaussianModel::new(TOY_EPS, toy_data(TOY_N, TOY_EPS, seed)).unwrap()
}

pub fn toy_problem_with(model: ToyGaussianModel, sigma_q: f64) -> ViProblem {
    let data: Vec<Vec<f64>> = model.data().iter().map(|x| x.to_vec()).collect();
    ViProblem::new(Arc::new(model), Arc::new(GlobalGaussian::fixed(2, sigma_q).unwrap()), Arc::new(data)).unwrap()
}

pub fn toy_problem(seed: u64) -> ViProblem {
    toy_problem_with(toy_model(seed), TOY_SIGMA_Q)
}

/// x_i = θ z_i + noise with θ = `theta`, q(z_i | x_i) = N(λ x_i, σ²).
pub fn scalar_problem(n: usize, theta: f64, sigma: f64, seed: u64) -> ViProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..n).map(|_| vec![theta * normal(&mut rng) + normal(&mut rng)]).collect();
    ViProblem::new(
        Arc::new(ScalarLinearGaussianModel::new(theta)),
        Arc::new(LinearAmortized::new(sigma).unwrap()),
        Arc::new(data),
    )
    .unwrap()
}

pub fn logreg_problem(n: usize, features: usize, seed: u64) -> ViProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..features).map(|_| normal(&mut rng)).collect();
    let data: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..features).map(|_| normal(&mut rng)).collect();
            let t: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3;
            let y = if rng.random::<f64>() < 1.0 / (1.0 + (-t).exp()) { 1.0 } else { 0.0 };
            x.push(y);
            x
        })
        .collect();
    let model = LogisticRegressionModel::new(features, true, 1.0).unwrap();
    let family = GlobalGaussian::learned(features + 1, -1.0);
    ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(data)).unwrap()
}

/// Binary images of `pixels` pixels with a bias toward a few prototypes.
pub fn vae_problem(n: usize, pixels: usize, latent: usize, hidden: usize, seed: u64) -> ViProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..pixels).map(|p| if (p + i % 3) % 3 == 0 || rng.random::<f64>() < 0.15 { 1.0 } else { 0.0 }).collect())
        .collect();
    let model = mini_vae_model(pixels, latent, hidden).unwrap();
    let family = EncoderFamily::new(pixels, &[hidden, hidden], latent, InputTransform::Identity).unwrap();
    ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(data)).unwrap()
}

pub fn poisson_problem(users: usize, movies: usize, latent: usize, seed: u64) -> ViProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..users).map(|_| (0..movies).map(|_| f64::from(rng.random_range(0u32..4))).collect()).collect();
    let model = poisson_mf_model(movies, latent).unwrap();
    let family = EncoderFamily::new(movies, &[6], latent, InputTransform::Log1p).unwrap();
    ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(data)).unwrap()
}

/// One instance of each model, small enough for exhaustive checks.
pub fn all_problems() -> Vec<(&'static str, ViProblem)> {
    vec![
        ("toy", toy_problem(1)),
        ("scalar", scalar_problem(12, 0.7, 0.5, 2)),
        ("logreg", logreg_problem(30, 3, 3)),
        ("vae", vae_problem(10, 6, 2, 4, 4)),
        ("poisson", poisson_problem(8, 5, 2, 5)),
    ]
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}
