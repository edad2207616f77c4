//! Flat parameter vectors with a named block layout.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
}

/// Ordered, contiguous blocks covering `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block; returns its index range.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let range = self.len..self.len + len;
        self.blocks.push(Block { name: name.into(), range: range.clone() });
        self.len += len;
        range
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|b| b.name == name).map(|b| b.range.clone())
    }

    /// Contiguous span of all blocks whose name starts with `prefix`.
    pub fn span(&self, prefix: &str) -> Range<usize> {
        let mut hits = self.blocks.iter().filter(|b| b.name.starts_with(prefix));
        match hits.next() {
            None => 0..0,
            Some(first) => {
                let end = hits.next_back().map_or(first.range.end, |b| b.range.end);
                first.range.start..end
            }
        }
    }
}

/// η = (λ, θ) as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        check_dim(layout.len(), values.len())?;
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let r = self
            .layout
            .block(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter block named {name}")))?;
        Ok(&self.values[r])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }
}
