//! Constrained quantum-classical dynamics built on the Dirac bracket.
//!
//! The library couples a small quantum subsystem (a few discrete states) to
//! classical degrees of freedom subject to holonomic constraints. Instead of
//! enforcing the constraints iteratively, the classical symplectic form is
//! replaced by a constrained kernel that annihilates the constraint gradients,
//! so the constraints are conserved by construction and the exact Lagrange
//! multipliers come out in closed form. On top of that kernel sit:
//!
//! - scalar and matrix-valued constrained brackets ([`bracket`]),
//! - adiabatic surface-hopping propagation with the constrained
//!   momentum-jump rule ([`propagator`]),
//! - the stationary density matrix through first order in `hbar`, invariant
//!   measure sampling and the solvability diagnostics ([`statmech`]),
//! - linear response functions with the constraint-induced correction
//!   terms ([`response`]).
//!
//! Runnable entry points live in `examples/`; the `diracqc` binary drives
//! batch runs (`check`, `propagate`, `sample`, `respond`) from a TOML config.

pub mod bracket;
pub mod checks;
pub mod config;
pub mod constraints;
pub mod error;
pub mod output;
pub mod phase;
pub mod propagator;
pub mod quantum;
pub mod response;
pub mod rng;
pub mod runner;
pub mod statmech;

pub use error::{Error, Result};
pub use phase::{PhasePoint, PhysicalConstants, ScalarPhaseFunction};
