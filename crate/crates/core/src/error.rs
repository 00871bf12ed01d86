use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A density matrix failed one of the qubit-state invariants.
    #[error("invalid qubit state: {invariant} violated ({detail})")]
    InvalidState {
        invariant: &'static str,
        detail: String,
    },

    #[error("Bloch vector outside the unit ball: norm {norm}")]
    OutOfBall { norm: f64 },

    /// Inconsistent model data (non-Hermitian Hamiltonian, bad observable, ...).
    #[error("model error: {0}")]
    Model(String),

    /// Integrator or chain drifted out of the state space beyond the repair tolerance.
    #[error("numerical drift: {0}")]
    NumericalDrift(String),

    /// Non-diagonal observable with a vanishing outcome probability.
    #[error("degenerate observable: {0}")]
    DegenerateObservable(String),

    /// Bad user-supplied parameters or configuration documents.
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn drift(msg: impl Into<String>) -> Self {
        Error::NumericalDrift(msg.into())
    }

    /// True for errors that signal numerical drift rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalDrift(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
