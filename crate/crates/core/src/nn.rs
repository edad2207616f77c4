//! Small fully-connected networks with hand-written backprop and forward-mode JVP.
//!
//! Parameters live in a caller-owned flat slice. Layer `l` stores a
//! `fan_out × (fan_in + bias)` row-major weight matrix whose last column is
//! the bias, so the gradient of a layer is `g ⊗ [a; 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    pub activation: Activation,
    /// Start of this layer's weights within the network's parameter slice.
    pub offset: usize,
}

impl DenseLayer {
    /// Width of the homogeneous input `[a; 1]`.
    pub fn cols(&self) -> usize {
        self.fan_in + usize::from(self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.fan_out * self.cols()
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.param_count()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    param_count: usize,
}

/// Activations recorded by [`Mlp::forward`]; `acts[0]` is the input.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Input seen by layer `l` (without the bias coordinate).
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.acts[l]
    }
}

impl Mlp {
    /// Layers given as `(fan_in, fan_out, bias, activation)`; consecutive widths must chain.
    pub fn new(spec: &[(usize, usize, bool, Activation)]) -> Result<Self> {
        if spec.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut offset = 0;
        for (i, &(fan_in, fan_out, bias, activation)) in spec.iter().enumerate() {
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::InvalidArgument("layer widths must be positive".into()));
            }
            if i > 0 {
                check_dim(spec[i - 1].1, fan_in)?;
            }
            let layer = DenseLayer { fan_in, fan_out, bias, activation, offset };
            offset += layer.param_count();
            layers.push(layer);
        }
        Ok(Self { layers, param_count: offset })
    }

    /// `widths[0] → widths[1] → … → widths[last]` with tanh hidden units and a linear output.
    pub fn tanh_stack(widths: &[usize], bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let spec: Vec<_> = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Tanh };
                (widths[i], widths[i + 1], bias, act)
            })
            .collect();
        Self::new(&spec)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out
    }

    /// LeCun-normal weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        assert_eq!(out.len(), self.param_count);
        for layer in &self.layers {
            let scale = 1.0 / (layer.fan_in as f64).sqrt();
            let cols = layer.cols();
            for r in 0..layer.fan_out {
                for c in 0..cols {
                    let idx = layer.offset + r * cols + c;
                    out[idx] = if c < layer.fan_in {
                        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], input: &[f64], cache: &mut MlpCache) -> Result<()> {
        check_dim(self.param_count, params.len())?;
        check_dim(self.input_dim(), input.len())?;
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let a = &done[l];
            let out = &mut rest[0];
            out.clear();
            let w = layer.weights(params);
            let cols = layer.cols();
            for r in 0..layer.fan_out {
                let row = &w[r * cols..(r + 1) * cols];
                let mut s = if layer.bias { row[layer.fan_in] } else { 0.0 };
                for (wi, ai) in row[..layer.fan_in].iter().zip(a) {
                    s += wi * ai;
                }
                out.push(match layer.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                });
            }
        }
        Ok(())
    }

    /// Convenience forward pass returning only the output.
    pub fn apply(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let mut cache = MlpCache::default();
        self.forward(params, input, &mut cache)?;
        Ok(cache.output().to_vec())
    }

    /// Backpropagates `grad_out` (∂L/∂output) through the cached pass.
    ///
    /// Adds the weight gradient into `grad_params` when given, reports each
    /// layer's pre-activation gradient to `on_layer(l, g)`, and returns ∂L/∂input.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        grad_out: &[f64],
        mut grad_params: Option<&mut [f64]>,
        mut on_layer: impl FnMut(usize, &[f64]),
    ) -> Vec<f64> {
        let mut upstream = grad_out.to_vec();
        let mut g = Vec::new();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.acts[l + 1];
            g.clear();
            g.extend(upstream.iter().zip(out).map(|(u, y)| match layer.activation {
                Activation::Tanh => u * (1.0 - y * y),
                Activation::Identity => *u,
            }));
            on_layer(l, &g);
            let a = &cache.acts[l];
            let w = layer.weights(params);
            let cols = layer.cols();
            let mut down = vec![0.0; layer.fan_in];
            for (r, &gr) in g.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                let row = &w[r * cols..r * cols + layer.fan_in];
                for (d, wi) in down.iter_mut().zip(row) {
                    *d += gr * wi;
                }
                if let Some(gp) = grad_params.as_deref_mut() {
                    let grow = &mut gp[layer.offset + r * cols..layer.offset + (r + 1) * cols];
                    for (gw, ai) in grow[..layer.fan_in].iter_mut().zip(a) {
                        *gw += gr * ai;
                    }
                    if layer.bias {
                        grow[layer.fan_in] += gr;
                    }
                }
            }
            upstream = down;
        }
        upstream
    }

    /// Forward-mode derivative of the output along `(params_dot, input_dot)`.
    pub fn jvp(&self, params: &[f64], params_dot: &[f64], input: &[f64], input_dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.param_count, params.len())?;
        check_dim(self.param_count, params_dot.len())?;
        check_dim(self.input_dim(), input.len())?;
        check_dim(self.input_dim(), input_dot.len())?;
        let mut a = input.to_vec();
        let mut a_dot = input_dot.to_vec();
        for layer in &self.layers {
            let w = layer.weights(params);
            let w_dot = layer.weights(params_dot);
            let cols = layer.cols();
            let mut next = Vec::with_capacity(layer.fan_out);
            let mut next_dot = Vec::with_capacity(layer.fan_out);
            for r in 0..layer.fan_out {
                let row = &w[r * cols..(r + 1) * cols];
                let row_dot = &w_dot[r * cols..(r + 1) * cols];
                let (mut s, mut s_dot) = if layer.bias { (row[layer.fan_in], row_dot[layer.fan_in]) } else { (0.0, 0.0) };
                for i in 0..layer.fan_in {
                    s += row[i] * a[i];
                    s_dot += row_dot[i] * a[i] + row[i] * a_dot[i];
                }
                match layer.activation {
                    Activation::Tanh => {
                        let y = s.tanh();
                        next.push(y);
                        next_dot.push((1.0 - y * y) * s_dot);
                    }
                    Activation::Identity => {
                        next.push(s);
                        next_dot.push(s_dot);
                    }
                }
            }
            a = next;
            a_dot = next_dot;
        }
        Ok((a, a_dot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (Mlp, Vec<f64>) {
        let mlp = Mlp::tanh_stack(&[3, 4, 2], true).unwrap();
        let mut p = vec![0.0; mlp.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        mlp.init_params(&mut rng, &mut p);
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.01 * i as f64;
        }
        (mlp, p)
    }

    #[test]
    fn shapes() {
        let (mlp, _) = net();
        assert_eq!(mlp.param_count(), 4 * 4 + 2 * 5);
        assert_eq!(mlp.layers()[1].offset, 16);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mlp, p) = net();
        let x = [0.3, -0.7, 1.1];
        let w = [0.8, -1.3];
        let f = |p: &[f64], x: &[f64]| -> f64 {
            let y = mlp.apply(p, x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut cache = MlpCache::default();
        mlp.forward(&p, &x, &mut cache).unwrap();
        let mut gp = vec![0.0; p.len()];
        let gx = mlp.backward(&p, &cache, &w, Some(&mut gp), |_, _| {});
        let h = 1e-6;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &x) - f(&b, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-8, "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..3 {
            let (mut a, mut b) = (x, x);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn jvp_matches_backward() {
        let (mlp, p) = net();
        let x = [0.3, -0.7, 1.1];
        let pd: Vec<f64> = (0..p.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let xd = [0.5, 0.25, -1.0];
        let (_, yd) = mlp.jvp(&p, &pd, &x, &xd).unwrap();
        let mut cache = MlpCache::default();
        mlp.forward(&p, &x, &mut cache).unwrap();
        for (j, ydj) in yd.iter().enumerate() {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            let mut gp = vec![0.0; p.len()];
            let gx = mlp.backward(&p, &cache, &e, Some(&mut gp), |_, _| {});
            let lin: f64 = gp.iter().zip(&pd).map(|(a, b)| a * b).sum::<f64>() + gx.iter().zip(&xd).map(|(a, b)| a * b).sum::<f64>();
            assert!((lin - ydj).abs() < 1e-12);
        }
    }
}
