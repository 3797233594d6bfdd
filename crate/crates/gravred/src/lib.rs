//! Gravity-induced quantum state reduction.
//!
//! The crate is layered bottom-up:
//!
//! - [`massmodel`]: rigid mass densities, Newtonian potentials, coupling energies and decay times.
//! - [`dpcore`]: the non-relativistic stochastic reduction process, exact decay trees and Monte Carlo runs.
//! - [`relfield`]: classical scenarios on a space-time grid, bundling, amplitude fields and the couplings field.
//! - [`redwave`]: reduction waves sweeping the grid and the event bookkeeping that goes with them.
//! - [`corrsig`]: correlated reductions, the signaling constraint and closed-form predictions.
//! - [`scenario`]: experiment descriptions, builtin setups and run persistence.

pub mod constants;
pub mod corrsig;
pub mod dpcore;
pub mod error;
pub mod massmodel;
pub mod quad;
pub mod redwave;
pub mod relfield;
pub mod scenario;

pub use error::{Error, Result};
