use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Dimension mismatch, malformed probability vector, bad index and similar.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A spectral radius that must be below one is not.
    #[error("{what} is not Schur stable: spectral radius {spectral_radius:.17} >= 1")]
    Unstable { what: String, spectral_radius: f64 },

    #[error("no Lyapunov certificate: spectral radius {spectral_radius} >= rho {rho}")]
    NoCertificate { spectral_radius: f64, rho: f64 },

    #[error("Markov chain is not ergodic: {0}")]
    NonErgodic(String),

    #[error("offsets are not centered (|sum p_i b_i| = {residual:e}); call center_offsets first")]
    NotCentered { residual: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("eigenvalue is not simple: {0}")]
    NotSimple(String),

    #[error("augmented dimension n*d^2 = {size} exceeds the cap of {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("no sign change of sigma(H22) - 1 on [{lo}, {hi}]; widen the bracket")]
    NoBracket { lo: f64, hi: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
