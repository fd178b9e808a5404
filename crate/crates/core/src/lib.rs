//! Simulation and calibration of an anisotropic pedestrian interaction model
//! with body size.
//!
//! - [`model`]: right-hand side of the agent ODEs and all derivatives.
//! - [`simulator`]: leap-frog time stepping, scenarios and boundaries.
//! - [`calibration`]: tracking cost, adjoint solve, reduced gradient and the
//!   mini-batch projected steepest-descent loop.
//! - [`density`]: bounded Voronoi cells, density lookup and fundamental
//!   diagrams.
//! - [`data_io`]: trajectory archive parsing, resampling and CSV/JSON export.
//! - [`gradcheck`]: finite-difference verification of the adjoint gradient.
//! - [`config`]: TOML run configuration.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod data_io;
pub mod density;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
pub use geometry::{Mat2, Rect, Vec2};
pub use model::{AdmissibleBox, ControlVector, InteractionSign, ModelParams};
pub use simulator::{Scenario, Trajectory};
