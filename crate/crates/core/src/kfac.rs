//! Kronecker-factored curvature for feed-forward likelihoods and encoders.
//!
//! Each dense layer's Fisher block is approximated as n·A ⊗ G, with A the
//! second moment of the homogeneous layer input [a; 1] and G the second
//! moment of the gradient at the layer's pre-activation. With row-major
//! weights, vec(V) ↦ vec(G⁻¹ V A⁻¹) inverts the block. Blocks are treated as
//! independent (block-diagonal K-FAC).

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::family::EncoderFamily;
use crate::fisher::PredictiveBatch;
use crate::linalg::{low_rank_truncate, LowRankFactor, SymMatrix};
use crate::models::GenerativeNetwork;
use crate::nn::{Mlp, MlpCache};
use crate::params::ParamVector;
use crate::problem::{Batch, ViProblem};
use crate::reduce::ordered_reduce;
use crate::rng::{fill_standard_normal, NoiseContext, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KfacLayer {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    /// Position of this layer's weights within η.
    pub params: Range<usize>,
}

impl KfacLayer {
    pub fn a_dim(&self) -> usize {
        self.fan_in + usize::from(self.bias)
    }

    pub fn g_dim(&self) -> usize {
        self.fan_out
    }
}

/// Inference layers, then the stochastic junction z = m + σ ⊙ ε, then generative layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkView {
    pub inference: Vec<KfacLayer>,
    pub latent_dim: usize,
    pub generative: Vec<KfacLayer>,
}

impl NetworkView {
    pub fn layers(&self) -> Vec<KfacLayer> {
        self.inference.iter().chain(&self.generative).cloned().collect()
    }

    /// True when the layers tile `0..dim` exactly.
    pub fn covers(&self, dim: usize) -> bool {
        let mut ranges: Vec<Range<usize>> = self.layers().into_iter().map(|l| l.params).collect();
        ranges.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in ranges {
            if r.start != next {
                return false;
            }
            next = r.end;
        }
        next == dim
    }
}

fn mlp_layers(mlp: &Mlp, prefix: &str, offset: usize) -> Vec<KfacLayer> {
    mlp.layers()
        .iter()
        .enumerate()
        .map(|(i, l)| KfacLayer {
            name: format!("{prefix}.{i}"),
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            bias: l.bias,
            params: offset + l.offset..offset + l.offset + l.param_count(),
        })
        .collect()
}

/// Layer list of a problem whose likelihood is a feed-forward network of z.
/// Inference layers are present when the family is an encoder.
pub fn stacked_network_view(problem: &ViProblem) -> Result<NetworkView> {
    let net = problem.model().network().ok_or(Error::NotFeedForward)?;
    let inference = problem.family().as_encoder().map(|e| mlp_layers(e.mlp(), "encoder", 0)).unwrap_or_default();
    let generative = mlp_layers(&net.mlp, "decoder", problem.theta_range().start);
    Ok(NetworkView { inference, latent_dim: problem.model().latent_dim(), generative })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfacConfig {
    /// EMA decay ρ ∈ [0, 1).
    pub rho: f64,
    /// Low-rank truncation keeps ceil(K ln dim) eigenpairs.
    pub k: f64,
    /// Factors with dimension above this are truncated.
    pub truncate_above: usize,
}

impl Default for KfacConfig {
    fn default() -> Self {
        Self { rho: 0.95, k: 5.0, truncate_above: 128 }
    }
}

/// Per-layer batch moments E[ããᵀ] and E[ggᵀ].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub a: SymMatrix,
    pub g: SymMatrix,
}

impl LayerMoments {
    /// Means of the outer products of the given samples; inputs exclude the bias coordinate.
    pub fn from_samples(layer: &KfacLayer, inputs: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<Self> {
        if inputs.is_empty() || grads.is_empty() {
            return Err(Error::InvalidArgument("moments need at least one sample".into()));
        }
        let mut a = SymMatrix::zeros(layer.a_dim());
        for x in inputs {
            check_dim(layer.fan_in, x.len())?;
            a.add_outer(&homogeneous(x, layer.bias), 1.0 / inputs.len() as f64);
        }
        let mut g = SymMatrix::zeros(layer.g_dim());
        for v in grads {
            check_dim(layer.fan_out, v.len())?;
            g.add_outer(v, 1.0 / grads.len() as f64);
        }
        Ok(Self { a, g })
    }
}

fn homogeneous(a: &[f64], bias: bool) -> Vec<f64> {
    let mut v = a.to_vec();
    if bias {
        v.push(1.0);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacState {
    layers: Vec<KfacLayer>,
    a: Vec<SymMatrix>,
    g: Vec<SymMatrix>,
    steps: u64,
    /// Zero-initialized EMAs are divided by 1 − ρᵗ when read.
    debias: bool,
    /// Multiplies A when solving (the training-set size n).
    scale: f64,
    config: KfacConfig,
}

impl KfacState {
    /// Zero-initialized factors.
    pub fn new(layers: Vec<KfacLayer>, scale: f64, config: KfacConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1), got {}", config.rho)));
        }
        let a = layers.iter().map(|l| SymMatrix::zeros(l.a_dim())).collect();
        let g = layers.iter().map(|l| SymMatrix::zeros(l.g_dim())).collect();
        Ok(Self { layers, a, g, steps: 0, debias: true, scale, config })
    }

    /// Factors set explicitly; reads are not bias-corrected.
    pub fn with_factors(layers: Vec<KfacLayer>, a: Vec<SymMatrix>, g: Vec<SymMatrix>, scale: f64, config: KfacConfig) -> Result<Self> {
        let mut s = Self::new(layers, scale, config)?;
        check_dim(s.layers.len(), a.len())?;
        check_dim(s.layers.len(), g.len())?;
        for (l, (am, gm)) in s.layers.iter().zip(a.iter().zip(&g)) {
            check_dim(l.a_dim(), am.dim())?;
            check_dim(l.g_dim(), gm.dim())?;
        }
        s.a = a;
        s.g = g;
        s.steps = 1;
        s.debias = false;
        Ok(s)
    }

    pub fn layers(&self) -> &[KfacLayer] {
        &self.layers
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &KfacConfig {
        &self.config
    }

    /// Stored (not bias-corrected) factors of layer `l`.
    pub fn raw_factors(&self, l: usize) -> (&SymMatrix, &SymMatrix) {
        (&self.a[l], &self.g[l])
    }

    /// A ← ρA + (1−ρ)·moment, likewise G.
    pub fn update_factors(&mut self, moments: &[LayerMoments]) -> Result<()> {
        check_dim(self.layers.len(), moments.len())?;
        for (l, m) in moments.iter().enumerate() {
            check_dim(self.a[l].dim(), m.a.dim())?;
            check_dim(self.g[l].dim(), m.g.dim())?;
        }
        let rho = self.config.rho;
        for (l, m) in moments.iter().enumerate() {
            self.a[l].scale(rho);
            self.a[l].add_scaled(&m.a, 1.0 - rho)?;
            self.g[l].scale(rho);
            self.g[l].add_scaled(&m.g, 1.0 - rho)?;
        }
        self.steps += 1;
        Ok(())
    }

    /// Per-sample form of [`Self::update_factors`]: `layer_inputs[l]` and
    /// `layer_grads[l]` list the activation and gradient samples of layer `l`.
    pub fn update_from_samples(&mut self, layer_inputs: &[Vec<Vec<f64>>], layer_grads: &[Vec<Vec<f64>>]) -> Result<()> {
        check_dim(self.layers.len(), layer_inputs.len())?;
        check_dim(self.layers.len(), layer_grads.len())?;
        let moments = self
            .layers
            .iter()
            .zip(layer_inputs.iter().zip(layer_grads))
            .map(|(l, (a, g))| LayerMoments::from_samples(l, a, g))
            .collect::<Result<Vec<_>>>()?;
        self.update_factors(&moments)
    }

    fn correction(&self) -> f64 {
        if self.debias {
            1.0 / (1.0 - self.config.rho.powi(self.steps.min(i32::MAX as u64) as i32))
        } else {
            1.0
        }
    }

    /// Sum over layers of tr(n A) tr(G) and the parameter count, for trace-scaled damping.
    pub fn trace_and_dim(&self) -> (f64, usize) {
        let c = self.correction();
        let mut tr = 0.0;
        let mut dim = 0;
        for l in 0..self.layers.len() {
            tr += self.scale * c * self.a[l].trace() * c * self.g[l].trace();
            dim += self.layers[l].a_dim() * self.layers[l].g_dim();
        }
        (tr, dim)
    }

    /// direction_l = (G_l + √μ I)⁻¹ V_l (n A_l + √μ I)⁻¹ for each layer's
    /// row-major gradient V_l.
    pub fn kfac_solve(&self, mu: f64, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.steps == 0 {
            return Err(Error::FactorsUninitialized);
        }
        if !(mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("dampening must be nonnegative, got {mu}")));
        }
        check_dim(self.layers.len(), grads.len())?;
        let d = mu.sqrt();
        let c = self.correction();
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let (rows, cols) = (layer.g_dim(), layer.a_dim());
                check_dim(rows * cols, grads[l].len())?;
                let a_inv = FactorInverse::new(&self.a[l].scaled(self.scale * c), d, &self.config)?;
                let g_inv = FactorInverse::new(&self.g[l].scaled(c), d, &self.config)?;
                let v = DMatrix::from_row_slice(rows, cols, &grads[l]);
                let left = g_inv.solve_columns(&v)?;
                let right = a_inv.solve_columns(&left.transpose())?.transpose();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend(right.row(r).iter());
                }
                Ok(out)
            })
            .collect()
    }

    /// Applies [`Self::kfac_solve`] to the layer ranges of η; other entries are copied.
    pub fn solve_eta(&self, mu: f64, grad: &[f64]) -> Result<Vec<f64>> {
        let grads: Vec<Vec<f64>> = self.layers.iter().map(|l| grad[l.params.clone()].to_vec()).collect();
        let dirs = self.kfac_solve(mu, &grads)?;
        let mut out = grad.to_vec();
        for (l, d) in self.layers.iter().zip(dirs) {
            out[l.params.clone()].copy_from_slice(&d);
        }
        Ok(out)
    }
}

enum FactorInverse {
    Dense(Cholesky<f64, Dyn>),
    LowRank(LowRankFactor, f64),
}

impl FactorInverse {
    fn new(m: &SymMatrix, shift: f64, config: &KfacConfig) -> Result<Self> {
        if m.dim() > config.truncate_above {
            return Ok(Self::LowRank(low_rank_truncate(m, config.k)?, shift));
        }
        let mut dm = m.to_dmatrix();
        for i in 0..m.dim() {
            dm[(i, i)] += shift;
        }
        Ok(Self::Dense(dm.cholesky().ok_or(Error::SingularSystem)?))
    }

    /// M⁻¹ X, column by column.
    fn solve_columns(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::Dense(ch) => Ok(ch.solve(x)),
            Self::LowRank(f, shift) => {
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for c in 0..x.ncols() {
                    let col: Vec<f64> = x.column(c).iter().copied().collect();
                    let y = f.apply_shifted_inverse(*shift, &col)?;
                    out.column_mut(c).copy_from_slice(&y);
                }
                Ok(out)
            }
        }
    }
}

/// Accumulates per-layer outer products for one chunk of datapoints.
struct MomentAcc {
    a: Vec<SymMatrix>,
    g: Vec<SymMatrix>,
}

impl MomentAcc {
    fn new(layers: &[KfacLayer]) -> Self {
        Self {
            a: layers.iter().map(|l| SymMatrix::zeros(l.a_dim())).collect(),
            g: layers.iter().map(|l| SymMatrix::zeros(l.g_dim())).collect(),
        }
    }

    fn absorb(&mut self, other: MomentAcc) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            x.add_scaled(y, 1.0).expect("same dim");
        }
        for (x, y) in self.g.iter_mut().zip(&other.g) {
            x.add_scaled(y, 1.0).expect("same dim");
        }
    }

    fn add_inputs(&mut self, offset: usize, mlp: &Mlp, cache: &MlpCache, weight: f64) {
        for (l, layer) in mlp.layers().iter().enumerate() {
            self.a[offset + l].add_outer(&homogeneous(cache.layer_input(l), layer.bias), weight);
        }
    }

    fn finish(self, count: usize) -> Vec<LayerMoments> {
        let w = 1.0 / count as f64;
        self.a
            .into_iter()
            .zip(self.g)
            .map(|(a, g)| LayerMoments { a: a.scaled(w), g: g.scaled(w) })
            .collect()
    }
}

/// How the expectation over x' enters the gradient factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSampling {
    /// Gradients of the predictive draws in the batch, each weighted 1/M.
    Predictive,
    /// Closed-form output Fisher: one backpropagated √f_j e_j per output unit.
    Exact,
}

/// Layer moments of the predictive Fisher for the stacked network of a problem.
pub fn vpng_layer_moments(
    problem: &ViProblem,
    eta: &ParamVector,
    pred: &PredictiveBatch,
    view: &NetworkView,
    sampling: FactorSampling,
) -> Result<Vec<LayerMoments>> {
    let net: &GenerativeNetwork = problem.model().network().ok_or(Error::NotFeedForward)?;
    let encoder: Option<&EncoderFamily> = problem.family().as_encoder();
    let (lambda, theta) = problem.split(eta.values());
    let layers = view.layers();
    let n_inf = view.inference.len();
    let acc = ordered_reduce(
        pred.items.len(),
        || MomentAcc::new(&layers),
        |acc, j| {
            let item = &pred.items[j];
            let x = &problem.data()[item.index];
            let eval = problem.family().evaluate(lambda, x)?;
            let mut dec = MlpCache::default();
            net.forward(&item.latent, theta, &mut dec)?;
            if let (Some(enc), Some(cache)) = (encoder, eval.encoder_cache()) {
                acc.add_inputs(0, enc.mlp(), cache, 1.0);
            }
            acc.add_inputs(n_inf, &net.mlp, &dec, 1.0);
            let out = dec.output();
            let (grads, weight): (Vec<Vec<f64>>, f64) = match sampling {
                FactorSampling::Predictive => (
                    item.draws.iter().map(|d| net.output_grad(d, out)).collect(),
                    1.0 / pred.mc_samples as f64,
                ),
                FactorSampling::Exact => (
                    (0..out.len())
                        .map(|k| {
                            let mut e = vec![0.0; out.len()];
                            e[k] = net.likelihood.fisher(out[k]).sqrt();
                            e
                        })
                        .collect(),
                    1.0,
                ),
            };
            for g_out in grads {
                let gz = net.mlp.backward(theta, &dec, &g_out, None, |l, g| acc.g[n_inf + l].add_outer(g, weight));
                if let Some(enc) = encoder {
                    let gs: Vec<f64> = gz.iter().zip(&item.noise.values).map(|(a, b)| a * b).collect();
                    enc.pullback_layers(lambda, &eval, &gz, &gs, None, |l, g| acc.g[l].add_outer(g, weight));
                }
            }
            Ok(())
        },
        MomentAcc::absorb,
    )?;
    // Each datapoint's latent draws are separate items; averaging over items matches the dense scaling.
    Ok(acc.finish(pred.items.len()))
}

/// Layer moments of the q-Fisher for an encoder family, from M score samples per datapoint.
pub fn qfisher_layer_moments(
    problem: &ViProblem,
    eta: &ParamVector,
    batch: &Batch,
    m: usize,
    ctx: NoiseContext,
) -> Result<(Vec<KfacLayer>, Vec<LayerMoments>)> {
    let encoder = problem.family().as_encoder().ok_or(Error::NotFeedForward)?;
    let layers = mlp_layers(encoder.mlp(), "encoder", 0);
    let (lambda, _) = problem.split(eta.values());
    let acc = ordered_reduce(
        batch.len(),
        || MomentAcc::new(&layers),
        |acc, pos| {
            let i = batch.indices[pos];
            let eval = problem.family().evaluate(lambda, &problem.data()[i])?;
            let cache = eval.encoder_cache().expect("encoder cache");
            acc.add_inputs(0, encoder.mlp(), cache, 1.0);
            let mut rng = ctx.key(Stream::QScore, i as u64).rng();
            let mut eps = vec![0.0; eval.q.dim()];
            for _ in 0..m {
                fill_standard_normal(&mut rng, &mut eps);
                // Score of log q in (means, σ): ε/σ and (ε² − 1)/σ.
                let gm: Vec<f64> = eps.iter().zip(eval.q.stddevs()).map(|(e, s)| e / s).collect();
                let gs: Vec<f64> = eps.iter().zip(eval.q.stddevs()).map(|(e, s)| (e * e - 1.0) / s).collect();
                encoder.pullback_layers(lambda, &eval, &gm, &gs, None, |l, g| acc.g[l].add_outer(g, 1.0 / m as f64));
            }
            Ok(())
        },
        MomentAcc::absorb,
    )?;
    Ok((layers, acc.finish(batch.len())))
}
