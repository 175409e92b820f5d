//! The stationary scaled update and its baselines.
//!
//! With `λ = exp(ρ)` and a fixed Hurst exponent `H`, one refinement step is
//!
//! ```text
//! h' = (1 − λ)·h + (λ·h + λ·A(h) + λ^{1+H}·B(x)) = h + λ·A(h) + λ^{1+H}·B(x)
//! y  = λ^{−H}·C(h) + D(x)
//! ```
//!
//! The same map is applied at every iteration; only `ρ` and the operator
//! weights are trained.

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{GateTrace, Model, ModelConfig, ModelDims, ModelKind, StepTrace, Trajectory};

use serde::{Deserialize, Serialize};

use crate::error::{FrostError, Result};
use crate::numerics::{all_finite, axpy, AffineMap, MlpMap, ParamSlot, Params};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_HURST: f64 = 0.8;

/// Scale `λ = exp(ρ)` (trainable through `ρ`) and Hurst exponent `H` (fixed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParameters {
    pub rho: f64,
    pub hurst: f64,
}

impl Default for ScaleParameters {
    fn default() -> Self {
        ScaleParameters {
            rho: DEFAULT_LAMBDA.ln(),
            hurst: DEFAULT_HURST,
        }
    }
}

impl ScaleParameters {
    /// `lambda` may be 0 (the degenerate identity limit, `ρ = −∞`).
    pub fn with_lambda(lambda: f64, hurst: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(FrostError::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(hurst > 0.0 && hurst <= 1.0) {
            return Err(FrostError::Config(format!("Hurst exponent must be in (0, 1], got {hurst}")));
        }
        Ok(ScaleParameters {
            rho: lambda.ln(),
            hurst,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.rho.exp()
    }

    /// `λ^{1+H}`
    pub fn input_gain(&self) -> f64 {
        ((1.0 + self.hurst) * self.rho).exp()
    }

    /// `λ^{−H}`
    pub fn output_gain(&self) -> f64 {
        (-self.hurst * self.rho).exp()
    }
}

/// `λ = exp(ρ)`.
pub fn lambda_value(p: &ScaleParameters) -> f64 {
    p.lambda()
}

impl Params for ScaleParameters {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        out.push(ParamSlot {
            name: if prefix.is_empty() { "rho".into() } else { format!("{prefix}.rho") },
            shape: vec![1],
            values: std::slice::from_ref(&self.rho),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(std::slice::from_mut(&mut self.rho));
    }
}

/// Transition `A`, input map `B`, readout `C` and feedthrough `D`, plus the
/// scale they are applied at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub a: MlpMap,
    pub b: AffineMap,
    pub c: AffineMap,
    pub d: AffineMap,
    pub scale: ScaleParameters,
}

impl OperatorSet {
    pub fn new(a: MlpMap, b: AffineMap, c: AffineMap, d: AffineMap, scale: ScaleParameters) -> Result<Self> {
        let hid = a.dim_in();
        if a.dim_out() != hid {
            return Err(FrostError::shape("OperatorSet A", hid, a.dim_out()));
        }
        if b.dim_out() != hid {
            return Err(FrostError::shape("OperatorSet B", hid, b.dim_out()));
        }
        if c.dim_in() != hid {
            return Err(FrostError::shape("OperatorSet C", hid, c.dim_in()));
        }
        if d.dim_in() != b.dim_in() {
            return Err(FrostError::shape("OperatorSet D input", b.dim_in(), d.dim_in()));
        }
        if d.dim_out() != c.dim_out() {
            return Err(FrostError::shape("OperatorSet D output", c.dim_out(), d.dim_out()));
        }
        Ok(OperatorSet { a, b, c, d, scale })
    }

    pub fn d_in(&self) -> usize {
        self.b.dim_in()
    }

    pub fn d_hid(&self) -> usize {
        self.a.dim_in()
    }

    pub fn d_out(&self) -> usize {
        self.c.dim_out()
    }

    pub fn zeros_like(&self) -> Self {
        OperatorSet {
            a: self.a.zeros_like(),
            b: AffineMap::zeros(self.b.dim_in(), self.b.dim_out()),
            c: AffineMap::zeros(self.c.dim_in(), self.c.dim_out()),
            d: AffineMap::zeros(self.d.dim_in(), self.d.dim_out()),
            scale: ScaleParameters {
                rho: 0.0,
                hurst: self.scale.hurst,
            },
        }
    }

    /// `A_λ(h) = λ·A(h)`
    pub fn scaled_transition(&self, h: &[f64]) -> Result<Vec<f64>> {
        let lambda = self.scale.lambda();
        Ok(self.a.apply(h)?.into_iter().map(|v| lambda * v).collect())
    }

    /// `B_λ(x) = λ^{1+H}·B(x)`, bias included in the scaled map.
    pub fn scaled_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        let gain = self.scale.input_gain();
        Ok(self.b.apply(x)?.into_iter().map(|v| gain * v).collect())
    }

    /// `h + λ·A(h) + λ^{1+H}·B(x)`
    pub fn frost_step(&self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut out = h.to_vec();
        axpy(&mut out, 1.0, &self.scaled_transition(h)?);
        axpy(&mut out, 1.0, &self.scaled_input(x)?);
        if !all_finite(&out) {
            return Err(FrostError::Numeric("non-finite state after step".into()));
        }
        Ok(out)
    }

    /// `y = λ^{−H}·C(h) + D(x)`
    pub fn readout(&self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let gain = self.scale.output_gain();
        let mut y: Vec<f64> = self.c.apply(h)?.into_iter().map(|v| gain * v).collect();
        axpy(&mut y, 1.0, &self.d.apply(x)?);
        Ok(y)
    }

    /// Unscaled `C(h) + D(x)`.
    pub fn plain_readout(&self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.c.apply(h)?;
        axpy(&mut y, 1.0, &self.d.apply(x)?);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, Activation, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_ops(a: f64, lambda: f64, hurst: f64) -> OperatorSet {
        let amap = MlpMap::new(
            vec![AffineMap::new(Matrix::diag(&[a]), vec![0.0]).unwrap()],
            Activation::Tanh,
            0.0,
        )
        .unwrap();
        OperatorSet::new(
            amap,
            AffineMap::new(Matrix::identity(1), vec![0.0]).unwrap(),
            AffineMap::new(Matrix::identity(1), vec![0.0]).unwrap(),
            AffineMap::zeros(1, 1),
            ScaleParameters::with_lambda(lambda, hurst).unwrap(),
        )
        .unwrap()
    }

    fn random_ops(rng: &mut ChaCha8Rng, lambda: f64, hurst: f64) -> OperatorSet {
        OperatorSet::new(
            MlpMap::init_square(4, 2, Activation::Tanh, -1.0, rng),
            AffineMap::init_uniform(3, 4, rng),
            AffineMap::init_uniform(4, 2, rng),
            AffineMap::init_uniform(3, 2, rng),
            ScaleParameters::with_lambda(lambda, hurst).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn lambda_reparameterization() {
        let p = ScaleParameters { rho: 0.0, hurst: 0.8 };
        assert_eq!(lambda_value(&p), 1.0);
        let p = ScaleParameters { rho: 0.5f64.ln(), hurst: 0.8 };
        assert!((p.lambda() - 0.5).abs() < 1e-15);
        let d = finite_difference_gradient(|r| r[0].exp(), &[p.rho], 1e-6).unwrap()[0];
        assert!((d - p.lambda()).abs() < 1e-8);
        let def = ScaleParameters::default();
        assert!((def.lambda() - 0.5).abs() < 1e-15);
        assert_eq!(def.hurst, 0.8);
    }

    #[test]
    fn scale_parameters_validate() {
        assert!(ScaleParameters::with_lambda(-0.1, 0.8).is_err());
        assert!(ScaleParameters::with_lambda(0.5, 0.0).is_err());
        assert!(ScaleParameters::with_lambda(0.5, 1.2).is_err());
        assert!(ScaleParameters::with_lambda(0.5, 1.0).is_ok());
    }

    #[test]
    fn scaled_operator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ops = random_ops(&mut rng, 1.0, 0.3);
        assert_eq!(ops.scaled_transition(&h).unwrap(), ops.a.apply(&h).unwrap());
        assert_eq!(ops.scaled_input(&x).unwrap(), ops.b.apply(&x).unwrap());

        let mut zero = ops.clone();
        zero.scale = ScaleParameters::with_lambda(0.0, 0.8).unwrap();
        assert!(zero.scaled_transition(&h).unwrap().iter().all(|&v| v == 0.0));

        let mut half = ops.clone();
        half.scale = ScaleParameters::with_lambda(0.5, 1.0).unwrap();
        let ah = ops.a.apply(&h).unwrap();
        for (s, a) in half.scaled_transition(&h).unwrap().iter().zip(&ah) {
            assert_eq!(*s, 0.5 * a);
        }
        let bx = ops.b.apply(&x).unwrap();
        for (s, b) in half.scaled_input(&x).unwrap().iter().zip(&bx) {
            assert!((s - 0.25 * b).abs() < 1e-15);
        }

        let mut q = ops.clone();
        q.scale = ScaleParameters::with_lambda(0.25, 0.8).unwrap();
        assert!((q.scale.input_gain() - 0.082_469_9).abs() < 1e-6);
    }

    #[test]
    fn step_examples() {
        // h + λ·a·h + λ^{1+H}·x = 2 + 0.5·(0.5·2) + 0.25·4
        let ops = scalar_ops(0.5, 0.5, 1.0);
        let h1 = ops.frost_step(&[2.0], &[4.0]).unwrap();
        assert!((h1[0] - 3.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ops = random_ops(&mut rng, 0.0, 0.8);
        let h = vec![0.3, -0.2, 0.9, 0.1];
        let x = vec![1.0, -1.0, 0.5];
        assert_eq!(ops.frost_step(&h, &x).unwrap(), h);

        let mut one = ops.clone();
        one.scale = ScaleParameters::with_lambda(1.0, 0.8).unwrap();
        let got = one.frost_step(&h, &x).unwrap();
        let ah = one.a.apply(&h).unwrap();
        let bx = one.b.apply(&x).unwrap();
        for i in 0..4 {
            assert_eq!(got[i], h[i] + ah[i] + bx[i]);
        }
    }

    #[test]
    fn readout_examples() {
        let ops = scalar_ops(0.5, 0.5, 1.0);
        assert!((ops.readout(&[1.0], &[7.0]).unwrap()[0] - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ops = random_ops(&mut rng, 1.0, 0.8);
        let h = vec![0.3, -0.2, 0.9, 0.1];
        let x = vec![1.0, -1.0, 0.5];
        let y = ops.readout(&h, &x).unwrap();
        assert_eq!(y, ops.plain_readout(&h, &x).unwrap());

        ops.c = AffineMap::zeros(4, 2);
        let y1 = ops.readout(&h, &x).unwrap();
        ops.scale = ScaleParameters::with_lambda(0.3, 0.8).unwrap();
        assert_eq!(ops.readout(&h, &x).unwrap(), y1);
    }

    #[test]
    fn operator_set_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ops = random_ops(&mut rng, 0.5, 0.8);
        let bad_b = AffineMap::zeros(3, 5);
        assert!(OperatorSet::new(ops.a.clone(), bad_b, ops.c.clone(), ops.d.clone(), ops.scale).is_err());
        assert!(ops.frost_step(&[0.0; 3], &[0.0; 3]).is_err());
    }
}
