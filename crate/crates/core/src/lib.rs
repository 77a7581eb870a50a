//! Simulation and dc voltage synthesis for a monolithic, mirror-symmetric,
//! multilevel microfabricated ion trap.
//!
//! The pipeline is: [`geometry`] builds the electrode surfaces and a panel
//! mesh, [`electrostatics`] solves one unit-voltage basis field per electrode
//! with a collocation boundary element method, [`potentials`] combines those
//! with an rf drive into pseudopotential and total potential, and then
//! [`single_ion`], [`chain`] and [`voltage_solver`] implement the analyses
//! on top of any [`source::FieldSource`].

pub mod chain;
pub mod electrostatics;
pub mod geometry;
pub mod minimize;
pub mod potentials;
pub mod source;
pub mod single_ion;
pub mod units;
pub mod voltage_solver;

pub use nalgebra::{Matrix3, Vector3};

/// Points and displacements in micrometres.
pub type Point3 = Vector3<f64>;

/// Version string embedded in cache files and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
