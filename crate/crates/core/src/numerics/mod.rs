//! Minimal differentiable dense linear algebra.
//!
//! Everything runs in `f64`. Maps expose a forward pass and an explicit
//! vector-Jacobian product; callers compose gradients by hand.

mod maps;
mod matrix;
mod params;
mod spectral;

pub use maps::{Activation, AffineMap, MlpMap, MlpTrace};
pub use matrix::Matrix;
pub use params::{assign_flat, flatten, GradEntry, GradientBundle, ParamSlot, Params};
pub use spectral::{
    power_iteration, spectral_norm_estimate, FnOperator, LinearOperator, PowerIteration,
    DEFAULT_POWER_ITERS,
};

use crate::error::{FrostError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `acc += s * v`
pub fn axpy(acc: &mut [f64], s: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(FrostError::shape(context, expected, v.len()));
    }
    Ok(())
}

/// Central-difference gradient `(f(θ+εe_k) − f(θ−εe_k)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(FrostError::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = probe[k];
        probe[k] = orig + eps;
        let plus = f(&probe);
        probe[k] = orig - eps;
        let minus = f(&probe);
        probe[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FrostError::Numeric(format!(
                "non-finite objective while differencing coordinate {k}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_quadratic() {
        let g = finite_difference_gradient(|t| t[0] * t[0], &[1.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant_and_linear() {
        let g = finite_difference_gradient(|_| 3.0, &[0.3, -2.0, 5.0], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_difference_gradient(|t| t.iter().sum(), &[0.3, -2.0, 5.0], 1e-4).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_rejects_bad_input() {
        assert!(finite_difference_gradient(|t| t[0], &[1.0], 0.0).is_err());
        let err = finite_difference_gradient(|t| 1.0 / (t[0] - 1.0e-4 - 1.0), &[1.0], 1e-4);
        assert!(matches!(err, Err(FrostError::Numeric(_))));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
