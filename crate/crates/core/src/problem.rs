//! A model, a variational family and a training set, with the η = (λ, θ) layout.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;

use crate::error::{check_dim, Error, Result};
use crate::family::{Family, LatentScope};
use crate::models::LatentModel;
use crate::params::{ParamLayout, ParamVector};
use crate::rng::{NoiseContext, Stream};

#[derive(Debug, Clone)]
pub struct ViProblem {
    model: Arc<dyn LatentModel>,
    family: Arc<dyn Family>,
    data: Arc<Vec<Vec<f64>>>,
    layout: Arc<ParamLayout>,
}

impl ViProblem {
    pub fn new(model: Arc<dyn LatentModel>, family: Arc<dyn Family>, data: Arc<Vec<Vec<f64>>>) -> Result<Self> {
        check_dim(model.latent_dim(), family.latent_dim())?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        for x in data.iter() {
            check_dim(model.data_dim(), x.len())?;
        }
        let mut layout = ParamLayout::new();
        for (name, len) in family.lambda_blocks() {
            layout.push(format!("lambda.{name}"), len);
        }
        for (name, len) in model.theta_blocks() {
            layout.push(format!("theta.{name}"), len);
        }
        Ok(Self { model, family, data, layout: Arc::new(layout) })
    }

    pub fn model(&self) -> &dyn LatentModel {
        self.model.as_ref()
    }

    pub fn family(&self) -> &dyn Family {
        self.family.as_ref()
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn lambda_range(&self) -> Range<usize> {
        0..self.family.lambda_dim()
    }

    pub fn theta_range(&self) -> Range<usize> {
        self.family.lambda_dim()..self.layout.len()
    }

    /// Splits η into (λ, θ).
    pub fn split<'a>(&self, eta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        eta.split_at(self.family.lambda_dim())
    }

    pub fn init_eta(&self, seed: u64) -> ParamVector {
        let mut rng = NoiseContext::new(seed, 0).key(Stream::Init, 0).rng();
        let mut v = self.family.init_lambda(&mut rng);
        v.extend(self.model.init_theta(&mut rng));
        ParamVector::new(self.layout.clone(), v).expect("family and model agree with the layout")
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(self.layout.clone(), values)
    }

    pub fn is_global(&self) -> bool {
        self.family.scope() == LatentScope::Global
    }
}

/// Indices into the training set plus the total count used for n/B scaling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub n_total: usize,
}

impl Batch {
    pub fn full(n: usize) -> Self {
        Self { indices: (0..n).collect(), n_total: n }
    }

    pub fn new(indices: Vec<usize>, n_total: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("batch is empty".into()));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= n_total) {
            return Err(Error::InvalidArgument(format!("batch index {i} out of range")));
        }
        Ok(Self { indices, n_total })
    }

    /// A size-`size` subset without replacement, sorted, as a function of (seed, iteration).
    pub fn sampled(n_total: usize, size: usize, ctx: NoiseContext) -> Self {
        if size >= n_total {
            return Self::full(n_total);
        }
        let mut rng = ctx.key(Stream::Batch, 0).rng();
        let mut indices = sample(&mut rng, n_total, size).into_vec();
        indices.sort_unstable();
        Self { indices, n_total }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// n / B
    pub fn scale(&self) -> f64 {
        self.n_total as f64 / self.indices.len() as f64
    }
}
