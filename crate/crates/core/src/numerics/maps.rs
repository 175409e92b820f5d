use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{join, ParamSlot, Params};
use super::{axpy, check_dim, sigmoid};
use crate::error::{FrostError, Result};

/// `v ↦ W·v + b`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dim("AffineMap::new bias", weight.rows(), &bias)?;
        if !super::all_finite(weight.as_slice()) || !super::all_finite(&bias) {
            return Err(FrostError::Numeric("affine parameters must be finite".into()));
        }
        Ok(AffineMap { weight, bias })
    }

    pub fn zeros(dim_in: usize, dim_out: usize) -> Self {
        AffineMap {
            weight: Matrix::zeros(dim_out, dim_in),
            bias: vec![0.0; dim_out],
        }
    }

    /// Uniform fan-based init in `[−a, a]`, `a = sqrt(6 / (dim_in + dim_out))`; zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(dim_in: usize, dim_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (dim_in + dim_out) as f64).sqrt();
        let mut m = AffineMap::zeros(dim_in, dim_out);
        for w in m.weight.as_mut_slice() {
            *w = rng.random_range(-a..=a);
        }
        m
    }

    pub fn dim_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn dim_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("AffineMap::apply", self.dim_in(), v)?;
        let mut out = self.weight.mul_vec(v);
        axpy(&mut out, 1.0, &self.bias);
        Ok(out)
    }

    /// Returns `(∂L/∂W = upstream ⊗ v, ∂L/∂b = upstream)` as a map-shaped bundle,
    /// and `∂L/∂v = Wᵀ · upstream`.
    pub fn vjp(&self, v: &[f64], upstream: &[f64]) -> Result<(AffineMap, Vec<f64>)> {
        let mut grad = AffineMap::zeros(self.dim_in(), self.dim_out());
        let dv = self.accumulate_vjp(v, upstream, &mut grad, 1.0)?;
        Ok((grad, dv))
    }

    /// Adds `scale ·` parameter gradients into `grad` and returns the input gradient
    /// (not scaled).
    pub fn accumulate_vjp(
        &self,
        v: &[f64],
        upstream: &[f64],
        grad: &mut AffineMap,
        scale: f64,
    ) -> Result<Vec<f64>> {
        check_dim("AffineMap::vjp input", self.dim_in(), v)?;
        check_dim("AffineMap::vjp upstream", self.dim_out(), upstream)?;
        grad.weight.add_outer(scale, upstream, v);
        axpy(&mut grad.bias, scale, upstream);
        Ok(self.weight.mul_vec_t(upstream))
    }

    /// Tangent of the output for an input tangent (the bias drops out).
    pub fn jvp(&self, dv: &[f64]) -> Vec<f64> {
        self.weight.mul_vec(dv)
    }

    /// Transposed linear part, `Wᵀ · u`.
    pub fn vjp_input(&self, upstream: &[f64]) -> Vec<f64> {
        self.weight.mul_vec_t(upstream)
    }
}

impl Params for AffineMap {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        out.push(ParamSlot {
            name: join(prefix, "weight"),
            shape: vec![self.weight.rows(), self.weight.cols()],
            values: self.weight.as_slice(),
        });
        out.push(ParamSlot {
            name: join(prefix, "bias"),
            shape: vec![self.bias.len()],
            values: &self.bias,
        });
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_mut_slice());
        out.push(&mut self.bias);
    }
}

/// Pointwise 1-Lipschitz nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn scalar(self, u: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = u.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if u > 0.0 {
                    (u, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(u);
                (s, s * (1.0 - s))
            }
        }
    }

    /// Elementwise values and derivatives.
    pub fn apply(self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        v.iter().map(|&u| self.scalar(u)).unzip()
    }
}

/// Multi-layer perceptron with an optional linear skip:
/// `h ↦ L_n(σ(… σ(L_1 h))) + skip · h`.
///
/// The activation follows every layer except the last. A nonzero `skip`
/// requires equal input and output widths; it is a fixed structural
/// constant, not a trainable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpMap {
    pub layers: Vec<AffineMap>,
    pub activation: Activation,
    #[serde(default)]
    pub skip: f64,
}

/// Intermediate values of one MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    /// Input to each layer (`layer_inputs[0]` is the map input).
    layer_inputs: Vec<Vec<f64>>,
    /// Activation derivatives after every hidden layer.
    derivs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

impl MlpMap {
    pub fn new(layers: Vec<AffineMap>, activation: Activation, skip: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(FrostError::Config("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].dim_out() != pair[1].dim_in() {
                return Err(FrostError::shape(
                    "MlpMap layer chain",
                    pair[0].dim_out(),
                    pair[1].dim_in(),
                ));
            }
        }
        let m = MlpMap {
            layers,
            activation,
            skip,
        };
        if skip != 0.0 && m.dim_in() != m.dim_out() {
            return Err(FrostError::shape("MlpMap skip", m.dim_in(), m.dim_out()));
        }
        Ok(m)
    }

    /// `depth` layers of width `dim`, uniform init.
    pub fn init_square<R: Rng + ?Sized>(
        dim: usize,
        depth: usize,
        activation: Activation,
        skip: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth.max(1))
            .map(|_| AffineMap::init_uniform(dim, dim, rng))
            .collect();
        MlpMap {
            layers,
            activation,
            skip,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpMap {
            layers: self
                .layers
                .iter()
                .map(|l| AffineMap::zeros(l.dim_in(), l.dim_out()))
                .collect(),
            activation: self.activation,
            skip: self.skip,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.layers[0].dim_in()
    }

    pub fn dim_out(&self) -> usize {
        self.layers[self.layers.len() - 1].dim_out()
    }

    pub fn forward(&self, h: &[f64]) -> Result<MlpTrace> {
        check_dim("MlpMap::forward", self.dim_in(), h)?;
        let n = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut derivs = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = h.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&cur)?;
            layer_inputs.push(cur);
            if k + 1 < n {
                let (val, d) = self.activation.apply(&pre);
                derivs.push(d);
                cur = val;
            } else {
                cur = pre;
            }
        }
        if self.skip != 0.0 {
            axpy(&mut cur, self.skip, h);
        }
        Ok(MlpTrace {
            input: h.to_vec(),
            layer_inputs,
            derivs,
            output: cur,
        })
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(h)?.output)
    }

    /// Accumulates `scale ·` parameter gradients into `grad`; returns `∂L/∂h`
    /// (unscaled).
    pub fn accumulate_vjp(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        grad: &mut MlpMap,
        scale: f64,
    ) -> Result<Vec<f64>> {
        check_dim("MlpMap::vjp upstream", self.dim_out(), upstream)?;
        let mut g = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                for (gi, d) in g.iter_mut().zip(&trace.derivs[k]) {
                    *gi *= d;
                }
            }
            g = self.layers[k].accumulate_vjp(
                &trace.layer_inputs[k],
                &g,
                &mut grad.layers[k],
                scale,
            )?;
        }
        if self.skip != 0.0 {
            axpy(&mut g, self.skip, upstream);
        }
        Ok(g)
    }

    pub fn vjp(&self, trace: &MlpTrace, upstream: &[f64]) -> Result<(MlpMap, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let dh = self.accumulate_vjp(trace, upstream, &mut grad, 1.0)?;
        Ok((grad, dh))
    }

    /// Input-only VJP, `J(h)ᵀ · u`.
    pub fn vjp_input(&self, trace: &MlpTrace, upstream: &[f64]) -> Vec<f64> {
        let mut g = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                for (gi, d) in g.iter_mut().zip(&trace.derivs[k]) {
                    *gi *= d;
                }
            }
            g = self.layers[k].vjp_input(&g);
        }
        if self.skip != 0.0 {
            axpy(&mut g, self.skip, upstream);
        }
        g
    }

    /// `J(h) · dv` at the traced point.
    pub fn jvp(&self, trace: &MlpTrace, dv: &[f64]) -> Vec<f64> {
        let mut t = dv.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            t = layer.jvp(&t);
            if k + 1 < self.layers.len() {
                for (ti, d) in t.iter_mut().zip(&trace.derivs[k]) {
                    *ti *= d;
                }
            }
        }
        if self.skip != 0.0 {
            axpy(&mut t, self.skip, dv);
        }
        t
    }

    /// Multiplies every layer weight by `s` (biases untouched).
    pub fn scale_weights(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale_in_place(s);
        }
    }
}

impl Params for MlpMap {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        for (k, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("layers.{k}")), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.layers {
            l.collect_params_mut(out);
        }
    }
}
