//! Stationary contractive state-space refinement with a scale-consistent
//! inductive bias, ranking-based adaptive halting calibrated by a KLL
//! quantile sketch, and an analysis suite that checks the contraction,
//! error-decay and gradient-bound properties of the update numerically.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense affine/MLP maps with VJPs, a finite-difference
//!   oracle and a power-iteration spectral norm estimator.
//! * [`dynamics`]: the scaled stationary update, its readout and the
//!   baseline step rules.
//! * [`sketch`]: KLL streaming quantile sketch.
//! * [`halting`]: halting head, batch-time ranking and early-exit inference.
//! * [`training`]: losses, backprop-through-time and the SGD loop.
//! * [`analysis`]: scale-consistency profiles, box-counting dimension and
//!   the property checks.
//! * [`harness`]: configuration, synthetic data and experiment orchestration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod halting;
pub mod harness;
pub mod numerics;
pub mod sketch;
pub mod training;

pub use error::{FrostError, Result};
