use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("qubit count mismatch: expected {expected}, found {found}")]
    QubitMismatch { expected: usize, found: usize },

    #[error("amplitude array of length {len} is not 2^{n_qubits}")]
    BadLength { n_qubits: usize, len: usize },

    #[error("{n_qubits} qubits exceeds the dense-matrix cap of {cap}")]
    DenseCapExceeded { n_qubits: usize, cap: usize },

    #[error("invalid Pauli word {0:?}")]
    BadWord(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge at t = {t}: estimated error {estimate:.3e} > tolerance {tol:.3e}")]
    Quadrature { t: f64, estimate: f64, tol: f64 },

    #[error("mode fit residual {achieved:.4e} exceeds tolerance {tol:.4e} with K = {modes}; try more modes")]
    FitResidual { achieved: f64, tol: f64, modes: usize },

    #[error("spectral weight {weight:.3e} < 0 at omega = {omega:.4}: correlation is not positive definite")]
    NegativeSpectralWeight { omega: f64, weight: f64 },

    #[error("integration unstable at step {step}: norm {norm:.3e}; reduce dt")]
    Unstable { step: usize, norm: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no successful trajectories out of {requested}")]
    NoTrajectories { requested: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
