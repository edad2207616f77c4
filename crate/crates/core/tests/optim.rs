mod common;

use common::*;
use proptest::prelude::*;
use vpng_core::elbo::grad_elbo;
use vpng_core::fisher::{FisherEstimate, FisherKind};
use vpng_core::linalg::SymMatrix;
use vpng_core::models::{toy_elbo_gradient, toy_posterior};
use vpng_core::optim::*;
use vpng_core::{Batch, Error, NoiseContext, ParamVector, ViProblem};

fn grad_config(step_size: f64) -> TrainConfig {
    TrainConfig { method: Method::Grad, step_size, mu: Damping::Constant(0.0), ..TrainConfig::default() }
}

#[test]
fn one_gradient_step_follows_the_closed_form_gradient() {
    // A vanishing q-scale makes the reparameterized gradient exact.
    let model = toy_model(1);
    let exact = toy_elbo_gradient(&model, &[0.0, 0.0]).unwrap();
    let p = toy_problem_with(model, 1e-12);
    let config = grad_config(1e-4);
    let mut state = OptimState::new(p.params(vec![0.0, 0.0]).unwrap());
    step(&mut state, &config, &p, &Batch::full(p.n())).unwrap();
    let expect: Vec<f64> = exact.iter().map(|g| 1e-4 * g).collect();
    assert!(rel_err(state.eta.values(), &expect) < 1e-8);
    assert_eq!(state.iteration, 1);
}

#[test]
fn gradient_step_uses_the_same_noise_as_grad_elbo() {
    let p = toy_problem(1);
    let eta = p.params(vec![0.3, 0.1]).unwrap();
    let config = TrainConfig { seed: 5, ..grad_config(1e-3) };
    let b = Batch::full(p.n());
    let g = grad_elbo(&p, &eta, &b, config.mc_samples, 1.0, NoiseContext::new(5, 0)).unwrap().grad.unwrap();
    let mut state = OptimState::new(eta.clone());
    step(&mut state, &config, &p, &b).unwrap();
    for k in 0..2 {
        assert_eq!(state.eta.values()[k], eta.values()[k] + 1e-3 * g.values()[k]);
    }
}

#[test]
fn identity_fisher_makes_vpng_a_gradient_step() {
    for (name, p) in all_problems() {
        let b = Batch::full(p.n());
        let start = p.init_eta(1);
        let grad = TrainConfig { seed: 3, ..grad_config(1e-3) };
        let vpng = TrainConfig { method: Method::Vpng, ..grad.clone() };
        let mut a = OptimState::new(start.clone());
        step(&mut a, &grad, &p, &b).unwrap();
        let mut v = OptimState::new(start);
        let options = StepOptions { fisher_override: Some(FisherEstimate::identity(p.dim(), b.clone())) };
        step_with(&mut v, &vpng, &p, &b, &options).unwrap();
        assert_eq!(a.eta, v.eta, "{name}");
    }
}

#[test]
fn rmsprop_first_step_is_root_ten() {
    let config = AdapterConfig { kind: AdapterKind::RmsProp, ..AdapterConfig::default() };
    let mut s = AdapterState::new(3);
    let d = [5.0, -20.0, 0.0];
    let out = adapter_scale(&mut s, &d, &config).unwrap();
    let r = 10f64.sqrt();
    assert!((out[0] - r).abs() < 1e-6);
    assert!((out[1] + r).abs() < 1e-6);
    assert_eq!(out[2], 0.0);
}

#[test]
fn adam_first_step_is_the_sign() {
    let config = AdapterConfig { kind: AdapterKind::Adam, ..AdapterConfig::default() };
    let mut s = AdapterState::new(3);
    let out = adapter_scale(&mut s, &[4.0, -0.5, 0.0], &config).unwrap();
    assert!((out[0] - 1.0).abs() < 1e-6);
    assert!((out[1] + 1.0).abs() < 1e-6);
    assert_eq!(out[2], 0.0);
}

#[test]
fn adam_settles_on_the_sign_for_a_constant_direction() {
    let config = AdapterConfig { kind: AdapterKind::Adam, ..AdapterConfig::default() };
    let mut s = AdapterState::new(3);
    let d = [2.0, -0.01, 300.0];
    let mut out = vec![];
    for _ in 0..1000 {
        out = adapter_scale(&mut s, &d, &config).unwrap();
    }
    for (o, v) in out.iter().zip(&d) {
        assert!((o - v.signum()).abs() < 0.01, "{o}");
    }
}

#[test]
fn no_adapter_passes_the_direction_through() {
    let mut s = AdapterState::new(2);
    assert_eq!(adapter_scale(&mut s, &[1.5, -2.0], &AdapterConfig::default()).unwrap(), vec![1.5, -2.0]);
    assert!(adapter_scale(&mut s, &[1.0], &AdapterConfig::default()).is_err());
}

proptest! {
    #[test]
    fn rmsprop_preserves_signs(dirs in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..20)) {
        let config = AdapterConfig { kind: AdapterKind::RmsProp, ..AdapterConfig::default() };
        let mut s = AdapterState::new(4);
        for d in dirs {
            let out = adapter_scale(&mut s, &d, &config).unwrap();
            for (o, v) in out.iter().zip(&d) {
                prop_assert!(o * v >= 0.0);
                prop_assert!(v.signum() == o.signum() || *v == 0.0);
            }
            prop_assert!(s.second.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn adam_preserves_signs_of_sign_stable_directions(
        signs in proptest::collection::vec(prop_oneof![Just(-1.0f64), Just(1.0)], 4),
        mags in proptest::collection::vec(proptest::collection::vec(1e-3f64..1e3, 4), 1..30),
    ) {
        let config = AdapterConfig { kind: AdapterKind::Adam, ..AdapterConfig::default() };
        let mut s = AdapterState::new(4);
        for m in mags {
            let d: Vec<f64> = m.iter().zip(&signs).map(|(a, b)| a * b).collect();
            let out = adapter_scale(&mut s, &d, &config).unwrap();
            for (o, v) in out.iter().zip(&d) {
                prop_assert!(o.signum() == v.signum());
            }
        }
    }
}

struct DistanceEval {
    target: Vec<f64>,
}

impl Evaluator for DistanceEval {
    fn evaluate(&mut self, _problem: &ViProblem, eta: &ParamVector) -> vpng_core::Result<EvalPoint> {
        let d = -rel_err(eta.values(), &self.target) * vpng_core::linalg::norm(&self.target);
        Ok(EvalPoint { train_elbo: d, test_elbo: d, train_auc: None, test_auc: None })
    }
}

#[test]
fn exact_vpng_iterates_approach_the_optimum_monotonically() {
    let model = toy_model(1);
    let (target, _) = toy_posterior(&model).unwrap();
    let p = toy_problem_with(model, 1e-12);
    let b = Batch::full(p.n());
    let c = 1.0 - TOY_EPS;
    let det = 1.0 - c * c;
    let n = TOY_N as f64;
    let f = SymMatrix::from_rows(&[vec![n / det, -n * c / det], vec![-n * c / det, n / det]]).unwrap();
    let options = StepOptions { fisher_override: Some(FisherEstimate { matrix: f, mc_samples: 0, batch: b.clone(), kind: FisherKind::Vpng }) };
    for step_size in [0.05, 0.3, 1.0] {
        let config = TrainConfig { method: Method::Vpng, step_size, mu: Damping::Constant(0.0), ..TrainConfig::default() };
        let mut state = OptimState::new(p.params(vec![0.0, 0.0]).unwrap());
        let mut last = vpng_core::linalg::norm(&target);
        for _ in 0..30 {
            step_with(&mut state, &config, &p, &b, &options).unwrap();
            let d = rel_err(state.eta.values(), &target) * vpng_core::linalg::norm(&target);
            assert!(d < last || d < 1e-12, "step {step_size}: {d} >= {last}");
            last = d;
        }
    }
}

#[test]
fn training_records_from_iteration_zero_and_is_reproducible() {
    for (name, p) in all_problems() {
        let config = TrainConfig { max_iters: 6, eval_every: 2, mc_samples: 2, seed: 4, batch_size: 4, step_size: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut ev = DistanceEval { target: vec![0.0; p.dim()] };
            train(&p, &config, p.init_eta(1), &mut ev).unwrap()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        let its: Vec<usize> = one.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 2, 4, 6], "{name}");
        assert_eq!(one.final_eta, four.final_eta, "{name}");
        let m = |r: &RunResult| r.records.iter().map(|x| x.metrics).collect::<Vec<_>>();
        assert_eq!(m(&one), m(&four), "{name}");
    }
}

#[test]
fn kfac_backends_run_on_network_models() {
    for p in [vae_problem(12, 6, 2, 4, 1), poisson_problem(10, 5, 2, 2)] {
        for method in [Method::Vpng, Method::Ng] {
            let config = TrainConfig {
                method,
                curvature_backend: CurvatureBackend::Kfac,
                max_iters: 3,
                eval_every: 1,
                mc_samples: 2,
                step_size: 0.01,
                adapter: AdapterConfig { kind: AdapterKind::RmsProp, ..AdapterConfig::default() },
                ..TrainConfig::default()
            };
            let mut ev = DistanceEval { target: vec![0.0; p.dim()] };
            let r = train(&p, &config, p.init_eta(0), &mut ev).unwrap();
            assert!(r.diverged.is_none());
            assert_eq!(r.records.len(), 4);
        }
    }
    let config = TrainConfig { curvature_backend: CurvatureBackend::Kfac, max_iters: 1, ..TrainConfig::default() };
    let p = toy_problem(1);
    let mut ev = DistanceEval { target: vec![0.0; 2] };
    assert!(matches!(train(&p, &config, p.init_eta(0), &mut ev), Err(Error::NotFeedForward)));
}

#[test]
fn divergence_is_reported_not_raised() {
    let p = toy_problem(1);
    let config = TrainConfig { max_iters: 200, eval_every: 10, ..grad_config(1.0) };
    let mut ev = DistanceEval { target: vec![0.0; 2] };
    let r = train(&p, &config, p.init_eta(0), &mut ev).unwrap();
    assert!(r.diverged.as_ref().is_some_and(Error::is_divergence));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { step_size: 0.0, ..TrainConfig::default() },
        TrainConfig { mc_samples: 0, ..TrainConfig::default() },
        TrainConfig { mu: Damping::Constant(-1.0), ..TrainConfig::default() },
        TrainConfig { eval_every: 0, ..TrainConfig::default() },
        TrainConfig { beta: 0.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn grid_search_examples() {
    let c = grad_config(0.1);
    let r = grid_search(std::slice::from_ref(&c), |_| Ok(Some(3.0))).unwrap();
    assert_eq!(r.best, c);

    let p = toy_problem(1);
    let configs = [grad_config(1e6), grad_config(1e-5)];
    let r = grid_search(&configs, |c| {
        let mut ev = DistanceEval { target: vec![0.0; 2] };
        let run = train(&p, &TrainConfig { max_iters: 20, eval_every: 5, ..c.clone() }, p.init_eta(0), &mut ev)?;
        Ok(if run.diverged.is_some() { None } else { run.last().map(|r| r.metrics.train_elbo) })
    })
    .unwrap();
    assert_eq!(r.best.step_size, 1e-5);
    assert_eq!(r.cells[0].metric, None);

    let tie = grid_search(&[grad_config(0.5), grad_config(0.1), grad_config(0.3)], |_| Ok(Some(1.0))).unwrap();
    assert_eq!(tie.best.step_size, 0.1);
    assert!(matches!(grid_search(&configs, |_| Ok(None)), Err(Error::AllRunsDiverged)));
    assert!(grid_search(&[], |_| Ok(Some(0.0))).is_err());
}

#[test]
fn vpng_grid_beats_every_gradient_cell_on_the_toy_model() {
    let model = toy_model(1);
    let (target, _) = toy_posterior(&model).unwrap();
    let p = toy_problem_with(model, TOY_SIGMA_Q);
    let steps = [1e-3, 1e-2, 1e-1];
    let base = TrainConfig { max_iters: 300, eval_every: 10, seed: 1, mu: Damping::TraceScaled, ..TrainConfig::default() };
    // Best distance reached along the trajectory, None if the run diverged first.
    let best_distance = |c: &TrainConfig| -> vpng_core::Result<Option<f64>> {
        let mut ev = DistanceEval { target: target.clone() };
        let run = train(&p, c, p.params(vec![0.0, 0.0]).unwrap(), &mut ev)?;
        Ok(run.records.iter().map(|r| r.metrics.train_elbo).reduce(f64::max))
    };
    let vpng: Vec<TrainConfig> = steps.iter().map(|&s| TrainConfig { method: Method::Vpng, step_size: s, ..base.clone() }).collect();
    let chosen = grid_search(&vpng, |c| {
        let mut ev = DistanceEval { target: target.clone() };
        let run = train(&p, c, p.params(vec![0.0, 0.0]).unwrap(), &mut ev)?;
        Ok(run.last().map(|r| r.metrics.train_elbo))
    })
    .unwrap();
    let vpng_dist = -chosen.best_metric;
    for &s in &steps {
        let g = TrainConfig { method: Method::Grad, step_size: s, ..base.clone() };
        let best = best_distance(&g).unwrap().map(|m| -m).unwrap_or(f64::INFINITY);
        assert!(vpng_dist < best, "vpng {vpng_dist} vs grad({s}) {best}");
    }
}

