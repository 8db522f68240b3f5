//! Deterministic estimation of expected SDE path functionals by cubature on
//! Wiener space.
//!
//! The pipeline: build a cubature formula ([`formula`]), lay it over a
//! non-uniform time partition ([`partition`]), prune the exponential path tree
//! by moment-preserving recombination ([`recombination`]), solve one
//! controlled ODE per surviving path ([`ode`]) and sum the weighted path
//! functionals ([`estimator`]). [`training`] differentiates the same sum with
//! respect to neural vector-field parameters.

pub mod error;
pub mod estimator;
pub mod formula;
pub mod ode;
pub mod partition;
pub mod recombination;
pub mod signature;
pub mod training;

pub use error::{Error, Result};
