//! Mean-field Gaussian variational families.
//!
//! [`MeanFieldGaussian`] is the distribution itself. A [`Family`] maps the
//! variational parameters λ (and, for amortized families, a datapoint x) to
//! one, and pulls gradients with respect to its means and stddevs back to λ.
//! Learned stddevs are parameterized by their logarithm.

use std::fmt;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::SymMatrix;
use crate::nn::{Mlp, MlpCache};
use crate::rng::NoiseDraw;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGaussian {
    means: Vec<f64>,
    stddevs: Vec<f64>,
    learn_stddev: bool,
}

/// Gradient with respect to (means, stddevs), stddevs in σ-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGrad {
    pub means: Vec<f64>,
    pub stddevs: Option<Vec<f64>>,
}

impl MeanFieldGaussian {
    pub fn new(means: Vec<f64>, stddevs: Vec<f64>, learn_stddev: bool) -> Result<Self> {
        check_dim(means.len(), stddevs.len())?;
        if means.is_empty() {
            return Err(Error::InvalidArgument("family dimension must be positive".into()));
        }
        if let Some(s) = stddevs.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("stddev must be positive and finite, got {s}")));
        }
        Ok(Self { means, stddevs, learn_stddev })
    }

    /// As [`Self::new`] for values computed from variational parameters, where
    /// an out-of-range result means the parameters have run off.
    pub(crate) fn from_parameters(means: Vec<f64>, stddevs: Vec<f64>, learn_stddev: bool) -> Result<Self> {
        if means.iter().chain(&stddevs).any(|v| !v.is_finite()) || stddevs.iter().any(|s| *s <= 0.0) {
            return Err(Error::DegenerateDistribution);
        }
        Self::new(means, stddevs, learn_stddev)
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    pub fn learn_stddev(&self) -> bool {
        self.learn_stddev
    }

    /// z = means + stddevs ⊙ ε
    pub fn reparameterize(&self, eps: &NoiseDraw) -> Result<Vec<f64>> {
        check_dim(self.dim(), eps.values.len())?;
        Ok(self.reparameterize_values(&eps.values))
    }

    /// means + stddevs ⊙ ε from a raw noise slice.
    pub fn reparameterize_values(&self, eps: &[f64]) -> Vec<f64> {
        self.means.iter().zip(&self.stddevs).zip(eps).map(|((m, s), e)| m + s * e).collect()
    }

    /// ε = (z − means) / stddevs
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(self.means.iter().zip(&self.stddevs).zip(z).map(|((m, s), z)| (z - m) / s).collect())
    }

    /// (∂z/∂(means, stddevs))ᵀ · grad_z for z = g(ε).
    pub fn pullback_to_lambda(&self, eps: &NoiseDraw, grad_z: &[f64]) -> Result<MomentGrad> {
        check_dim(self.dim(), eps.values.len())?;
        check_dim(self.dim(), grad_z.len())?;
        let stddevs = self
            .learn_stddev
            .then(|| grad_z.iter().zip(&eps.values).map(|(g, e)| g * e).collect());
        Ok(MomentGrad { means: grad_z.to_vec(), stddevs })
    }

    pub fn kl_to_standard_normal(&self) -> f64 {
        self.kl_to_isotropic(1.0)
    }

    /// KL(q ‖ N(0, σ₀² I)).
    pub fn kl_to_isotropic(&self, prior_stddev: f64) -> f64 {
        let v0 = prior_stddev * prior_stddev;
        self.means
            .iter()
            .zip(&self.stddevs)
            .map(|(m, s)| 0.5 * ((m * m + s * s) / v0 - 1.0 - 2.0 * (s / prior_stddev).ln()))
            .sum()
    }

    /// Gradient of [`Self::kl_to_isotropic`] with respect to (means, stddevs).
    pub fn kl_gradient(&self, prior_stddev: f64) -> (Vec<f64>, Vec<f64>) {
        let v0 = prior_stddev * prior_stddev;
        let gm = self.means.iter().map(|m| m / v0).collect();
        let gs = self.stddevs.iter().map(|s| s / v0 - 1.0 / s).collect();
        (gm, gs)
    }

    /// Fisher information in (means, stddevs) coordinates; the stddev block is
    /// present only when stddevs are learned.
    pub fn q_fisher(&self) -> SymMatrix {
        let mut diag: Vec<f64> = self.stddevs.iter().map(|s| 1.0 / (s * s)).collect();
        if self.learn_stddev {
            diag.extend(self.stddevs.iter().map(|s| 2.0 / (s * s)));
        }
        SymMatrix::from_diagonal(&diag)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.means
            .iter()
            .zip(&self.stddevs)
            .zip(z)
            .map(|((m, s), z)| {
                let u = (z - m) / s;
                -0.5 * (u * u + ln_2pi) - s.ln()
            })
            .sum()
    }

    /// ∇ log q(z) with respect to (means, stddevs).
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let u: Vec<f64> = self.means.iter().zip(&self.stddevs).zip(z).map(|((m, s), z)| (z - m) / s).collect();
        let mut out: Vec<f64> = u.iter().zip(&self.stddevs).map(|(u, s)| u / s).collect();
        if self.learn_stddev {
            out.extend(u.iter().zip(&self.stddevs).map(|(u, s)| (u * u - 1.0) / s));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentScope {
    /// One latent shared by every datapoint.
    Global,
    /// One latent per datapoint.
    Local,
}

/// q evaluated at (λ, x), plus whatever the family needs for pullbacks.
#[derive(Debug, Clone)]
pub struct FamilyEval {
    pub q: MeanFieldGaussian,
    cache: Option<MlpCache>,
    input: f64,
}

impl FamilyEval {
    /// Encoder activations, when the family is an inference network.
    pub fn encoder_cache(&self) -> Option<&MlpCache> {
        self.cache.as_ref()
    }
}

pub trait Family: Send + Sync + fmt::Debug {
    fn latent_dim(&self) -> usize;
    fn lambda_dim(&self) -> usize;
    /// Names and lengths of the λ blocks, in layout order.
    fn lambda_blocks(&self) -> Vec<(String, usize)>;
    fn scope(&self) -> LatentScope;
    fn learns_stddev(&self) -> bool;

    fn evaluate(&self, lambda: &[f64], x: &[f64]) -> Result<FamilyEval>;

    /// Adds (∂(means, stddevs)/∂λ)ᵀ (grad_means, grad_stddevs) into `out`.
    /// `grad_stddevs` is ignored by families with fixed stddevs.
    fn pullback(&self, lambda: &[f64], eval: &FamilyEval, grad_means: &[f64], grad_stddevs: &[f64], out: &mut [f64]);

    /// Directional derivative of (means, stddevs) along `lambda_dot`.
    fn push_forward(&self, lambda: &[f64], eval: &FamilyEval, lambda_dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// q-Fisher in λ coordinates. Amortized families sum it over `xs`
    /// (the batch) and multiply by `scale`; global families ignore both.
    fn q_fisher_lambda(&self, lambda: &[f64], xs: &[&[f64]], scale: f64) -> Result<SymMatrix>;

    fn init_lambda(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    fn as_encoder(&self) -> Option<&EncoderFamily> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StddevMode {
    Fixed(f64),
    /// Learned log-stddev, initialized to the given value.
    Learned { init_log_stddev: f64 },
}

/// q(z; λ) = N(means, diag(σ²)) shared by all datapoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGaussian {
    dim: usize,
    stddev: StddevMode,
}

impl GlobalGaussian {
    pub fn fixed(dim: usize, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0) {
            return Err(Error::InvalidArgument(format!("stddev must be positive, got {stddev}")));
        }
        Ok(Self { dim, stddev: StddevMode::Fixed(stddev) })
    }

    pub fn learned(dim: usize, init_log_stddev: f64) -> Self {
        Self { dim, stddev: StddevMode::Learned { init_log_stddev } }
    }

    pub fn distribution(&self, lambda: &[f64]) -> Result<MeanFieldGaussian> {
        check_dim(self.lambda_dim(), lambda.len())?;
        let means = lambda[..self.dim].to_vec();
        let stddevs = match self.stddev {
            StddevMode::Fixed(s) => vec![s; self.dim],
            StddevMode::Learned { .. } => lambda[self.dim..].iter().map(|l| l.exp()).collect(),
        };
        MeanFieldGaussian::from_parameters(means, stddevs, self.learns_stddev())
    }
}

impl Family for GlobalGaussian {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn lambda_dim(&self) -> usize {
        if self.learns_stddev() { 2 * self.dim } else { self.dim }
    }

    fn lambda_blocks(&self) -> Vec<(String, usize)> {
        let mut b = vec![("means".to_string(), self.dim)];
        if self.learns_stddev() {
            b.push(("log_stddevs".to_string(), self.dim));
        }
        b
    }

    fn scope(&self) -> LatentScope {
        LatentScope::Global
    }

    fn learns_stddev(&self) -> bool {
        matches!(self.stddev, StddevMode::Learned { .. })
    }

    fn evaluate(&self, lambda: &[f64], _x: &[f64]) -> Result<FamilyEval> {
        Ok(FamilyEval { q: self.distribution(lambda)?, cache: None, input: 0.0 })
    }

    fn pullback(&self, _lambda: &[f64], eval: &FamilyEval, grad_means: &[f64], grad_stddevs: &[f64], out: &mut [f64]) {
        for (o, g) in out[..self.dim].iter_mut().zip(grad_means) {
            *o += g;
        }
        if self.learns_stddev() {
            for ((o, g), s) in out[self.dim..].iter_mut().zip(grad_stddevs).zip(eval.q.stddevs()) {
                *o += g * s;
            }
        }
    }

    fn push_forward(&self, _lambda: &[f64], eval: &FamilyEval, lambda_dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.lambda_dim(), lambda_dot.len())?;
        let md = lambda_dot[..self.dim].to_vec();
        let sd = if self.learns_stddev() {
            lambda_dot[self.dim..].iter().zip(eval.q.stddevs()).map(|(l, s)| l * s).collect()
        } else {
            vec![0.0; self.dim]
        };
        Ok((md, sd))
    }

    fn q_fisher_lambda(&self, lambda: &[f64], _xs: &[&[f64]], _scale: f64) -> Result<SymMatrix> {
        let q = self.distribution(lambda)?;
        let mut diag: Vec<f64> = q.stddevs().iter().map(|s| 1.0 / (s * s)).collect();
        if self.learns_stddev() {
            // 2/σ² in σ-coordinates times (dσ/d log σ)² = σ².
            diag.extend(std::iter::repeat(2.0).take(self.dim));
        }
        Ok(SymMatrix::from_diagonal(&diag))
    }

    fn init_lambda(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut l = vec![0.0; self.dim];
        if let StddevMode::Learned { init_log_stddev } = self.stddev {
            l.extend(std::iter::repeat(init_log_stddev).take(self.dim));
        }
        l
    }
}

/// q(z_i | x_i; λ) = N(λ·x_i, σ²) for scalar observations and latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAmortized {
    stddev: f64,
}

impl LinearAmortized {
    pub fn new(stddev: f64) -> Result<Self> {
        if !(stddev > 0.0) {
            return Err(Error::InvalidArgument(format!("stddev must be positive, got {stddev}")));
        }
        Ok(Self { stddev })
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }
}

impl Family for LinearAmortized {
    fn latent_dim(&self) -> usize {
        1
    }

    fn lambda_dim(&self) -> usize {
        1
    }

    fn lambda_blocks(&self) -> Vec<(String, usize)> {
        vec![("slope".to_string(), 1)]
    }

    fn scope(&self) -> LatentScope {
        LatentScope::Local
    }

    fn learns_stddev(&self) -> bool {
        false
    }

    fn evaluate(&self, lambda: &[f64], x: &[f64]) -> Result<FamilyEval> {
        check_dim(1, lambda.len())?;
        check_dim(1, x.len())?;
        let q = MeanFieldGaussian::from_parameters(vec![lambda[0] * x[0]], vec![self.stddev], false)?;
        Ok(FamilyEval { q, cache: None, input: x[0] })
    }

    fn pullback(&self, _lambda: &[f64], eval: &FamilyEval, grad_means: &[f64], _grad_stddevs: &[f64], out: &mut [f64]) {
        out[0] += grad_means[0] * eval.input;
    }

    fn push_forward(&self, _lambda: &[f64], eval: &FamilyEval, lambda_dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(1, lambda_dot.len())?;
        Ok((vec![lambda_dot[0] * eval.input], vec![0.0]))
    }

    fn q_fisher_lambda(&self, _lambda: &[f64], xs: &[&[f64]], scale: f64) -> Result<SymMatrix> {
        let s: f64 = xs.iter().map(|x| x[0] * x[0]).sum();
        Ok(SymMatrix::from_diagonal(&[scale * s / (self.stddev * self.stddev)]))
    }

    fn init_lambda(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputTransform {
    Identity,
    /// ln(1 + x), for count data.
    Log1p,
}

/// Inference network x ↦ (means, log-stddevs) with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFamily {
    mlp: Mlp,
    latent_dim: usize,
    transform: InputTransform,
    init_log_stddev_bias: f64,
}

impl EncoderFamily {
    /// `input → hidden → … → hidden → 2·latent_dim`, one tanh layer per entry of `hidden`.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, transform: InputTransform) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * latent_dim);
        Ok(Self { mlp: Mlp::tanh_stack(&widths, true)?, latent_dim, transform, init_log_stddev_bias: 0.0 })
    }

    /// Initial bias of the log-stddev outputs (default 0, i.e. unit stddevs).
    pub fn with_init_log_stddev(mut self, value: f64) -> Self {
        self.init_log_stddev_bias = value;
        self
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn transform_input(&self, x: &[f64]) -> Vec<f64> {
        match self.transform {
            InputTransform::Identity => x.to_vec(),
            InputTransform::Log1p => x.iter().map(|v| v.ln_1p()).collect(),
        }
    }

    /// Gradient at the network output for a given (grad_means, grad_stddevs).
    pub fn output_grad(&self, eval: &FamilyEval, grad_means: &[f64], grad_stddevs: &[f64]) -> Vec<f64> {
        let mut g = grad_means.to_vec();
        g.extend(grad_stddevs.iter().zip(eval.q.stddevs()).map(|(g, s)| g * s));
        g
    }

    /// Like [`Family::pullback`], also reporting each layer's pre-activation gradient.
    pub fn pullback_layers(
        &self,
        lambda: &[f64],
        eval: &FamilyEval,
        grad_means: &[f64],
        grad_stddevs: &[f64],
        out: Option<&mut [f64]>,
        on_layer: impl FnMut(usize, &[f64]),
    ) {
        let cache = eval.cache.as_ref().expect("encoder evaluation carries a cache");
        let g = self.output_grad(eval, grad_means, grad_stddevs);
        self.mlp.backward(lambda, cache, &g, out, on_layer);
    }
}

impl Family for EncoderFamily {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn lambda_dim(&self) -> usize {
        self.mlp.param_count()
    }

    fn lambda_blocks(&self) -> Vec<(String, usize)> {
        self.mlp
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), l.param_count()))
            .collect()
    }

    fn scope(&self) -> LatentScope {
        LatentScope::Local
    }

    fn learns_stddev(&self) -> bool {
        true
    }

    fn evaluate(&self, lambda: &[f64], x: &[f64]) -> Result<FamilyEval> {
        let mut cache = MlpCache::default();
        self.mlp.forward(lambda, &self.transform_input(x), &mut cache)?;
        let out = cache.output();
        let d = self.latent_dim;
        let means = out[..d].to_vec();
        let stddevs = out[d..].iter().map(|l| l.exp()).collect();
        let q = MeanFieldGaussian::from_parameters(means, stddevs, true)?;
        Ok(FamilyEval { q, cache: Some(cache), input: 0.0 })
    }

    fn pullback(&self, lambda: &[f64], eval: &FamilyEval, grad_means: &[f64], grad_stddevs: &[f64], out: &mut [f64]) {
        self.pullback_layers(lambda, eval, grad_means, grad_stddevs, Some(out), |_, _| {});
    }

    fn push_forward(&self, lambda: &[f64], eval: &FamilyEval, lambda_dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = eval.cache.as_ref().expect("encoder evaluation carries a cache");
        let input = cache.layer_input(0);
        let (_, out_dot) = self.mlp.jvp(lambda, lambda_dot, input, &vec![0.0; input.len()])?;
        let d = self.latent_dim;
        let sd = out_dot[d..].iter().zip(eval.q.stddevs()).map(|(l, s)| l * s).collect();
        Ok((out_dot[..d].to_vec(), sd))
    }

    fn q_fisher_lambda(&self, lambda: &[f64], xs: &[&[f64]], scale: f64) -> Result<SymMatrix> {
        let p = self.lambda_dim();
        let d = self.latent_dim;
        let mut f = SymMatrix::zeros(p);
        for x in xs {
            let eval = self.evaluate(lambda, x)?;
            let cache = eval.cache.as_ref().expect("cache");
            for j in 0..2 * d {
                // Rows of D^{1/2} J, with D = diag(1/σ², 2) in (means, log σ) coordinates.
                let w = if j < d { 1.0 / eval.q.stddevs()[j] } else { 2f64.sqrt() };
                let mut e = vec![0.0; 2 * d];
                e[j] = w;
                let mut row = vec![0.0; p];
                self.mlp.backward(lambda, cache, &e, Some(&mut row), |_, _| {});
                f.add_outer(&row, scale);
            }
        }
        Ok(f)
    }

    fn init_lambda(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut l = vec![0.0; self.lambda_dim()];
        self.mlp.init_params(rng, &mut l);
        let last = self.mlp.layers().last().expect("nonempty");
        let cols = last.cols();
        for r in self.latent_dim..2 * self.latent_dim {
            // Shrink the log-stddev head and set its bias.
            for c in 0..last.fan_in {
                l[last.offset + r * cols + c] *= 0.1;
            }
            l[last.offset + r * cols + last.fan_in] = self.init_log_stddev_bias;
        }
        l
    }

    fn as_encoder(&self) -> Option<&EncoderFamily> {
        Some(self)
    }
}

/// Samples ε and returns (ε, z) for a family evaluation.
pub fn draw_latent<R: Rng + ?Sized>(q: &MeanFieldGaussian, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut eps = vec![0.0; q.dim()];
    crate::rng::fill_standard_normal(rng, &mut eps);
    let z = q.reparameterize_values(&eps);
    (eps, z)
}
