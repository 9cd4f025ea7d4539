//! Joint blind deconvolution and demixing of `s` bilinear signal pairs from a
//! single superposed measurement vector.
//!
//! The pipeline is: draw a [`operators::MeasurementEnsemble`] and a
//! [`model::ProblemInstance`], compute a spectral initial guess with
//! [`init::spectral_init`], then refine it with regularized Wirtinger gradient
//! descent in [`solver::descend`]. [`probes`] checks the local geometry
//! empirically and [`harness`] runs seeded Monte-Carlo experiments.

pub mod error;
pub mod harness;
pub mod init;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod probes;
pub mod rng;
pub mod solver;

pub use num_complex::Complex64 as C64;

pub use error::{DemixError, Result};
pub use init::{spectral_init, InitOutput};
pub use model::{generate_instance, BlockPair, ProblemInstance};
pub use operators::{make_ensemble, EnsembleKind, LiftedBlockDiag, MeasurementEnsemble};
pub use solver::{descend, SolverConfig, SolverTrace};
