mod common;

use std::sync::Arc;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use vpng_core::family::{EncoderFamily, GlobalGaussian, InputTransform};
use vpng_core::fisher::{estimate_exact_predictive_fisher, sample_predictive_batch};
use vpng_core::kfac::*;
use vpng_core::linalg::{dampened_solve, min_eigenvalue, SymMatrix};
use vpng_core::models::{mini_vae_model, poisson_mf_model, NetworkModel, OutputLikelihood};
use vpng_core::nn::{Activation, Mlp};
use vpng_core::{Batch, Error, NoiseContext, ViProblem};

fn layer(fan_in: usize, fan_out: usize, bias: bool) -> KfacLayer {
    let cols = fan_in + usize::from(bias);
    KfacLayer { name: "l".into(), fan_in, fan_out, bias, params: 0..fan_out * cols }
}

fn config(rho: f64) -> KfacConfig {
    KfacConfig { rho, ..KfacConfig::default() }
}

fn dense_inverse(m: &SymMatrix, shift: f64) -> DMatrix<f64> {
    let mut d = m.to_dmatrix();
    for i in 0..m.dim() {
        d[(i, i)] += shift;
    }
    d.try_inverse().unwrap()
}

#[test]
fn no_averaging_keeps_the_latest_moments() {
    let l = layer(2, 2, true);
    let mut s = KfacState::new(vec![l.clone()], 1.0, config(0.0)).unwrap();
    let first = LayerMoments::from_samples(&l, &[vec![1.0, 2.0]], &[vec![0.5, -1.0]]).unwrap();
    let second = LayerMoments::from_samples(&l, &[vec![-1.0, 0.0], vec![3.0, 1.0]], &[vec![2.0, 0.0]]).unwrap();
    s.update_factors(&[first]).unwrap();
    s.update_factors(std::slice::from_ref(&second)).unwrap();
    assert_eq!(s.raw_factors(0), (&second.a, &second.g));
    assert_eq!(s.steps(), 2);
}

#[test]
fn constant_inputs_give_an_all_ones_factor() {
    let l = layer(1, 1, true);
    let mut s = KfacState::new(vec![l], 1.0, config(0.0)).unwrap();
    s.update_from_samples(&[vec![vec![1.0]; 5]], &[vec![vec![2.0]; 5]]).unwrap();
    let ones = SymMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(s.raw_factors(0).0, &ones);
    assert_eq!(s.raw_factors(0).1.get(0, 0), 4.0);
}

#[test]
fn ema_follows_the_geometric_series() {
    let l = layer(1, 2, true);
    let a0 = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let g0 = SymMatrix::identity(2);
    let c = LayerMoments {
        a: SymMatrix::from_rows(&[vec![1.0, -0.3], vec![-0.3, 4.0]]).unwrap(),
        g: SymMatrix::from_rows(&[vec![0.2, 0.1], vec![0.1, 0.3]]).unwrap(),
    };
    let mut s = KfacState::with_factors(vec![l], vec![a0.clone()], vec![g0.clone()], 1.0, config(0.9)).unwrap();
    for _ in 0..3 {
        s.update_factors(std::slice::from_ref(&c)).unwrap();
    }
    let w = 0.9f64.powi(3);
    let mut expect_a = c.a.scaled(1.0 - w);
    expect_a.add_scaled(&a0, w).unwrap();
    let mut expect_g = c.g.scaled(1.0 - w);
    expect_g.add_scaled(&g0, w).unwrap();
    assert!(s.raw_factors(0).0.max_abs_diff(&expect_a) < 1e-12);
    assert!(s.raw_factors(0).1.max_abs_diff(&expect_g) < 1e-12);
}

#[test]
fn identity_factors_leave_the_gradient_unchanged() {
    let l = layer(2, 3, false);
    let s = KfacState::with_factors(vec![l], vec![SymMatrix::identity(2)], vec![SymMatrix::identity(3)], 1.0, config(0.9)).unwrap();
    let g = vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0];
    assert_eq!(s.kfac_solve(0.0, std::slice::from_ref(&g)).unwrap(), vec![g]);
}

#[test]
fn rank_one_factor_matches_a_dense_inverse() {
    let l = layer(3, 2, false);
    let a_vec = [1.0, -2.0, 0.5];
    let a = SymMatrix::outer(&a_vec);
    let g = SymMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
    let mu: f64 = 1e-4;
    let s = KfacState::with_factors(vec![l], vec![a.clone()], vec![g.clone()], 1.0, config(0.0)).unwrap();
    let v = vec![0.3, -1.0, 2.0, 1.5, 0.2, -0.7];
    let got = s.kfac_solve(mu, std::slice::from_ref(&v)).unwrap().remove(0);
    let vm = DMatrix::from_row_slice(2, 3, &v);
    let expect = dense_inverse(&g, mu.sqrt()) * vm * dense_inverse(&a, mu.sqrt());
    for r in 0..2 {
        for c in 0..3 {
            let e = expect[(r, c)];
            assert!((got[r * 3 + c] - e).abs() <= 1e-8 * e.abs().max(1.0), "{} vs {e}", got[r * 3 + c]);
        }
    }
}

#[test]
fn single_gaussian_layer_matches_the_dense_fisher() {
    let mlp = Mlp::new(&[(3, 2, false, Activation::Identity)]).unwrap();
    let model = NetworkModel::new("linear", mlp, OutputLikelihood::GaussianUnit);
    let data: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()]).collect();
    let p = ViProblem::new(Arc::new(model), Arc::new(GlobalGaussian::fixed(3, 1.0).unwrap()), Arc::new(data)).unwrap();
    let eta = p.init_eta(1);
    let batch = Batch::full(p.n());
    let pred = sample_predictive_batch(&p, &eta, &batch, 1, NoiseContext::new(2, 0)).unwrap();
    let dense = estimate_exact_predictive_fisher(&p, &eta, &pred).unwrap();
    let theta = p.theta_range();
    let k = theta.len();
    let mut block = SymMatrix::zeros(k);
    for i in 0..k {
        for j in 0..k {
            block.set(i, j, dense.matrix.get(theta.start + i, theta.start + j));
        }
    }
    let grad: Vec<f64> = (0..p.dim()).map(|i| 1.0 + (i as f64).cos()).collect();
    let expect = dampened_solve(&block, 0.0, &grad[theta.clone()]).unwrap();

    let view = stacked_network_view(&p).unwrap();
    assert!(view.inference.is_empty());
    let moments = vpng_layer_moments(&p, &eta, &pred, &view, FactorSampling::Exact).unwrap();
    let mut s = KfacState::new(view.layers(), p.n() as f64, config(0.0)).unwrap();
    s.update_factors(&moments).unwrap();
    let got = s.solve_eta(0.0, &grad).unwrap();
    assert_eq!(&got[..theta.start], &grad[..theta.start]);
    assert!(rel_err(&got[theta], &expect) < 1e-6);
}

#[test]
fn full_rank_truncation_matches_the_dense_solve() {
    let l = layer(4, 3, true);
    let mut dense = KfacState::new(vec![l.clone()], 10.0, config(0.5)).unwrap();
    let mut truncated = KfacState::new(vec![l.clone()], 10.0, KfacConfig { rho: 0.5, k: 100.0, truncate_above: 0 }).unwrap();
    let inputs: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect()).collect();
    let grads: Vec<Vec<f64>> = (0..6).map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 1.3).cos()).collect()).collect();
    for s in [&mut dense, &mut truncated] {
        s.update_from_samples(std::slice::from_ref(&inputs), std::slice::from_ref(&grads)).unwrap();
        s.update_from_samples(&[inputs[..3].to_vec()], &[grads[2..].to_vec()]).unwrap();
    }
    let v: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = dense.kfac_solve(0.01, std::slice::from_ref(&v)).unwrap().remove(0);
    let b = truncated.kfac_solve(0.01, &[v]).unwrap().remove(0);
    assert!(rel_err(&b, &a) < 1e-8, "{}", rel_err(&b, &a));
}

#[test]
fn uninitialized_factors_are_an_error() {
    let s = KfacState::new(vec![layer(2, 2, true)], 1.0, config(0.9)).unwrap();
    assert!(matches!(s.kfac_solve(0.1, &[vec![0.0; 6]]), Err(Error::FactorsUninitialized)));
}

#[test]
fn wrong_moment_shapes_are_rejected() {
    let mut s = KfacState::new(vec![layer(2, 2, true)], 1.0, config(0.9)).unwrap();
    let bad = LayerMoments { a: SymMatrix::identity(2), g: SymMatrix::identity(2) };
    assert!(matches!(s.update_factors(&[bad]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn vae_view_lists_six_layers() {
    let model = mini_vae_model(64, 10, 32).unwrap();
    let family = EncoderFamily::new(64, &[32, 32], 10, InputTransform::Identity).unwrap();
    let p = ViProblem::new(Arc::new(model), Arc::new(family), Arc::new(vec![vec![0.0; 64]])).unwrap();
    let view = stacked_network_view(&p).unwrap();
    let dims = |ls: &[KfacLayer]| ls.iter().map(|l| (l.fan_in, l.fan_out)).collect::<Vec<_>>();
    assert_eq!(dims(&view.inference), vec![(64, 32), (32, 32), (32, 20)]);
    assert_eq!(view.latent_dim, 10);
    assert_eq!(dims(&view.generative), vec![(10, 32), (32, 32), (32, 64)]);
    assert!(view.covers(p.dim()));
}

#[test]
fn poisson_view_has_one_generative_layer_without_bias() {
    let p = poisson_problem(4, 7, 3, 1);
    let view = stacked_network_view(&p).unwrap();
    assert_eq!(view.generative.len(), 1);
    let g = &view.generative[0];
    assert_eq!((g.fan_in, g.fan_out, g.bias), (3, 7, false));
    assert!(view.covers(p.dim()));
    let bare = ViProblem::new(Arc::new(poisson_mf_model(7, 3).unwrap()), Arc::new(GlobalGaussian::fixed(3, 1.0).unwrap()), Arc::new(vec![vec![1.0; 7]])).unwrap();
    let v = stacked_network_view(&bare).unwrap();
    assert!(v.inference.is_empty());
    assert_eq!(v.generative.len(), 1);
}

#[test]
fn models_without_layers_are_not_feed_forward() {
    assert!(matches!(stacked_network_view(&toy_problem(1)), Err(Error::NotFeedForward)));
    assert!(matches!(stacked_network_view(&logreg_problem(5, 2, 1)), Err(Error::NotFeedForward)));
}

#[test]
fn vae_factors_approximate_the_dense_fisher_direction() {
    // Not exact for a deep network, but the preconditioned directions should broadly agree.
    let p = vae_problem(40, 6, 2, 4, 2);
    let eta = p.init_eta(3);
    let batch = Batch::full(p.n());
    let pred = sample_predictive_batch(&p, &eta, &batch, 1, NoiseContext::new(1, 0)).unwrap();
    let dense = estimate_exact_predictive_fisher(&p, &eta, &pred).unwrap();
    let view = stacked_network_view(&p).unwrap();
    let moments = vpng_layer_moments(&p, &eta, &pred, &view, FactorSampling::Exact).unwrap();
    let mut s = KfacState::new(view.layers(), p.n() as f64, config(0.0)).unwrap();
    s.update_factors(&moments).unwrap();
    let grad: Vec<f64> = (0..p.dim()).map(|i| (i as f64 * 0.71).sin()).collect();
    let mu = 0.1 * dense.matrix.trace() / p.dim() as f64;
    let a = dampened_solve(&dense.matrix, mu, &grad).unwrap();
    let b = s.solve_eta(mu, &grad).unwrap();
    let cos = vpng_core::linalg::cosine(&a, &b);
    assert!(cos > 0.5, "{cos}");
}

fn psd(dim: usize, seed: &[f64]) -> SymMatrix {
    let mut m = SymMatrix::zeros(dim);
    for v in seed.chunks(dim) {
        m.add_outer(v, 1.0);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn solve_is_an_ascent_direction(
        a in proptest::collection::vec(-2.0f64..2.0, 6),
        g in proptest::collection::vec(-2.0f64..2.0, 4),
        v in proptest::collection::vec(-1.0f64..1.0, 6),
        mu in 1e-3f64..10.0,
    ) {
        let l = layer(2, 2, true);
        let s = KfacState::with_factors(vec![l], vec![psd(3, &a)], vec![psd(2, &g)], 5.0, config(0.9)).unwrap();
        let d = s.kfac_solve(mu, std::slice::from_ref(&v)).unwrap().remove(0);
        let inner: f64 = d.iter().zip(&v).map(|(x, y)| x * y).sum();
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        prop_assert!(inner > 0.0);
    }

    #[test]
    fn ema_factors_stay_psd(
        rho in 0.0f64..0.999,
        samples in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 5), 1..6),
    ) {
        let l = layer(2, 3, false);
        let mut s = KfacState::new(vec![l], 1.0, config(rho)).unwrap();
        for chunk in samples.chunks(2) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|v| v[..2].to_vec()).collect();
            let grads: Vec<Vec<f64>> = chunk.iter().map(|v| v[2..].to_vec()).collect();
            s.update_from_samples(&[inputs], &[grads]).unwrap();
            let (a, g) = s.raw_factors(0);
            prop_assert!(min_eigenvalue(a) >= -1e-8 * (1.0 + a.spectral_norm()));
            prop_assert!(min_eigenvalue(g) >= -1e-8 * (1.0 + g.spectral_norm()));
        }
    }
}
