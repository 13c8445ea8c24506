//! Crate-wide error type.

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Cholesky factorization hit a non-positive (or numerically zero) pivot.
    /// `min_eig` carries a smallest-eigenvalue estimate when the matrix is
    /// small enough to afford one.
    #[error("factorization failed at pivot {index}: diagonal value {value:.6e}{}",
            match .min_eig {
                Some(e) => format!(", smallest eigenvalue estimate {e:.6e}"),
                None => String::new(),
            })]
    FactorizationFailed {
        index: usize,
        value: f64,
        min_eig: Option<f64>,
    },

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("simulation diverged at step {step}: state norm {norm:.3e} exceeds {limit:.1e}")]
    Diverged { step: usize, norm: f64, limit: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 config trouble, 2 numerical trouble,
    /// 3 is reserved for strict-mode solver non-convergence (raised in the
    /// CLI itself, not via this enum).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
