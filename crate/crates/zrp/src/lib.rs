//! Simulation and numerical-analysis toolkit for one-dimensional asymmetric
//! zero-range processes with sitewise disorder.
//!
//! The crate has three layers:
//!
//! - exact computation: one-site equilibrium laws, product invariant
//!   measures, annealed densities and their convex-analytic transforms
//!   ([`equilibria`], [`flux`]), plus closed-form open-segment profiles
//!   ([`jackson`]);
//! - pathwise simulation: an event-driven realization of the dynamics from
//!   a shared space-time event stream, which couples any number of replicas
//!   through the same randomness ([`harris`]), with current and height
//!   observables on top ([`observables`]);
//! - experiments: scenario files and runners that turn both layers into
//!   statistical verdicts ([`scenario`], [`experiments`]).
//!
//! See the book under `book/` for a guided tour.

pub mod equilibria;
pub mod error;
pub mod experiments;
pub mod flux;
pub mod harris;
pub mod jackson;
pub mod model;
pub mod numerics;
pub mod observables;
pub mod scenario;

pub use error::{Error, Result};
