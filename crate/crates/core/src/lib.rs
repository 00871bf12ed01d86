//! Controlled quantum trajectories for a qubit under repeated indirect
//! measurement: the discrete measurement chain, its diffusive and jump
//! continuum limits, resonance fluorescence, and a dynamic-programming solver
//! for optimal feedback.

pub mod continuous;
pub mod discrete;
pub mod error;
pub mod fluorescence;
pub mod harness;
pub mod io;
pub mod model;
pub mod optimal;
pub mod qcore;
pub mod rng;
pub mod strategy;

pub use error::{Error, Result};
pub use model::{ControlBounds, ModelSpec, ObservableSpec};
pub use qcore::{BlochVector, Matrix2, QubitState};
pub use strategy::{parse_strategy, Strategy};
