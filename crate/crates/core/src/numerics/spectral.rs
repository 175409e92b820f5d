use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::norm;

pub const DEFAULT_POWER_ITERS: usize = 200;
const START_SEED: u64 = 0x0005_eed0_f5ca_1e00;

/// A linear map given through its forward and transposed products.
pub trait LinearOperator {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn apply_t(&self, u: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Matrix {
    fn dim_in(&self) -> usize {
        self.cols()
    }
    fn dim_out(&self) -> usize {
        self.rows()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.mul_vec(v)
    }
    fn apply_t(&self, u: &[f64]) -> Vec<f64> {
        self.mul_vec_t(u)
    }
}

/// Matvec/transpose-matvec closure pair.
pub struct FnOperator<F, G> {
    pub dim_in: usize,
    pub dim_out: usize,
    pub forward: F,
    pub transpose: G,
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.forward)(v)
    }
    fn apply_t(&self, u: &[f64]) -> Vec<f64> {
        (self.transpose)(u)
    }
}

#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub estimate: f64,
    /// Estimate after each iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Power iteration on `MᵀM` from a fixed seeded start vector. Stops after
/// `max_iters` or once the relative change of the estimate drops below `tol`.
pub fn power_iteration<M: LinearOperator + ?Sized>(
    op: &M,
    max_iters: usize,
    tol: f64,
) -> PowerIteration {
    let n = op.dim_in();
    let mut history = Vec::new();
    if n == 0 || op.dim_out() == 0 {
        return PowerIteration {
            estimate: 0.0,
            history,
            converged: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut estimate = 0.0;
    for _ in 0..max_iters.max(1) {
        let w = op.apply(&v);
        let sigma = norm(&w);
        history.push(sigma);
        if sigma == 0.0 {
            return PowerIteration {
                estimate: 0.0,
                history,
                converged: true,
            };
        }
        let prev = estimate;
        estimate = sigma;
        let mut next = op.apply_t(&w);
        let nn = norm(&next);
        if nn == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        v = next;
        if prev > 0.0 && ((estimate - prev) / estimate).abs() < tol {
            return PowerIteration {
                estimate,
                history,
                converged: true,
            };
        }
    }
    PowerIteration {
        estimate,
        history,
        converged: false,
    }
}

/// Largest singular value of `op`. A zero map yields 0.
pub fn spectral_norm_estimate<M: LinearOperator + ?Sized>(op: &M, iters: usize, tol: f64) -> f64 {
    power_iteration(op, iters, tol).estimate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        assert!((spectral_norm_estimate(&Matrix::identity(3), 200, 1e-12) - 1.0).abs() < 1e-12);
        let d = Matrix::diag(&[0.5, 0.2]);
        assert!((spectral_norm_estimate(&d, 200, 1e-14) - 0.5).abs() < 1e-12);
        assert_eq!(spectral_norm_estimate(&Matrix::zeros(4, 3), 200, 1e-12), 0.0);
    }

    #[test]
    fn closure_operator() {
        let m = Matrix::diag(&[3.0, -4.0]);
        let op = FnOperator {
            dim_in: 2,
            dim_out: 2,
            forward: |v: &[f64]| m.mul_vec(v),
            transpose: |u: &[f64]| m.mul_vec_t(u),
        };
        assert!((spectral_norm_estimate(&op, 200, 1e-14) - 4.0).abs() < 1e-10);
    }
}
