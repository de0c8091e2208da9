//! Overdamped quantum Brownian motion in one dimension.
//!
//! The dynamics is a Smoluchowski equation whose drift includes the Bohm
//! quantum potential of the density itself:
//!
//! ```text
//! d rho/dt = d/dx [ rho d/dx (U + Q + kB T ln rho) ] / b,
//! Q = -hbar^2 (sqrt rho)'' / (2 m sqrt rho)
//! ```
//!
//! Modules cover the free dispersion law, the nonlinear PDE solver, the
//! equilibrium problem, stationary tunneling, plasma charge relaxation and the
//! sedimentation of a single particle in gravity.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod barometric;
pub mod equilibrium;
pub mod error;
pub mod fields;
pub mod linalg;
pub mod msd;
pub mod params;
pub mod plasma;
pub mod smoluchowski;
pub mod tunneling;

pub use error::{Error, Result};
pub use fields::{
    drift_velocity, gibbs_duhem_residual, gradient, integrate, laplacian, normalize, quantum_potential, Boundary,
    DensityField, Grid1D, Mode, ScalarField,
};
pub use params::{derive_scales, make_unit_system, DerivedScales, PhysicalParams, UnitSystem};
