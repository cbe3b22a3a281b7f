//! Particle solver and verification instruments for anticipated mean-field
//! backward stochastic differential equations with jumps.
//!
//! The equation is solved backward on a uniform grid over `[0, T+M]`:
//! given terminal data on the window `[T, T+M]`, a regression-based
//! backward Euler sweep produces the triple `(Y, Z, K)` per particle, and a
//! fixed-point loop handles the driver's dependence on frozen anticipated
//! values, the weighted jump coefficient, and the particle law. Companion
//! instruments measure the contraction rate of the loop, an a priori
//! energy bound of the solution, and the orderings asserted by the
//! comparison results.
//!
//! Module map:
//! - [`lattice`]: time grid, delay functions, delay validation.
//! - [`noise`]: jump model and the simulated driving noise ensemble.
//! - [`measure`]: empirical measures, Wasserstein distance, measure
//!   derivative estimation.
//! - [`solver`]: regression conditional expectations, the backward step,
//!   anticipated-term evaluation, and the fixed-point loops.
//! - [`analysis`]: weighted norms, contraction and a priori diagnostics,
//!   comparison and monotone-chain harnesses.
//! - [`registry`]: named driver and terminal families for configuration
//!   files.

pub mod analysis;
pub mod error;
pub mod lattice;
pub mod measure;
pub mod noise;
pub mod registry;
pub mod solver;

pub use error::{Error, Result};
