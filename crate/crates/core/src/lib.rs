//! Simulation and state-estimation toolkit for a feedback-cooled nonlinear
//! oscillator under continuous weak position measurement.
//!
//! The crate has two halves that meet at a shared measurement record:
//!
//! * [`sme`] integrates a stochastic master equation in a truncated Fock
//!   basis (positivity-preserving Kraus stepping), both to generate a
//!   synthetic measurement record ("truth" mode) and to reconstruct the
//!   conditional quantum state from such a record ("estimation" mode).
//! * [`classical`] propagates the equivalent classical SDE and runs a
//!   bootstrap particle filter against the same record.
//!
//! [`phase_space`] compares the two posteriors: Wigner quasi-probability
//! fields from density matrices, histogram pdfs from particle ensembles,
//! and the discrete KL divergence between them. [`experiments`] wires the
//! pipeline end-to-end behind a config-driven CLI.

pub mod classical;
pub mod error;
pub mod experiments;
pub mod fock;
mod linalg;
pub mod phase_space;
pub mod sme;

pub use error::Error;

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
