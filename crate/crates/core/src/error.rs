use thiserror::Error;

/// Error type shared by every module. Variants map onto the CLI exit codes:
/// configuration problems exit 2, solver failures exit 3, everything that
/// amounts to a failed verification exits 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("set is not compactly contained: {0}")]
    NotCompactlyContained(String),

    #[error("degenerate level/shell: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("solver failure: {msg} (last residual {residual:.3e})")]
    SolverFailure { msg: String, residual: f64 },

    #[error("operator assembly error: {0}")]
    Assembly(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI (0 = pass, 1 = assertion failure,
    /// 2 = configuration error, 3 = solver failure).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Expr(_) => 2,
            Error::SolverFailure { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
