use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state is not physical (min eigenvalue of cov + i*Omega is {0:e})")]
    NotPhysical(f64),

    #[error("auxiliary combination has vanishing variance ({0:e})")]
    DegenerateAuxiliary(f64),

    #[error("coalition {0} holds no information about the displacement")]
    NoSignal(String),

    #[error("outcome matrix has no column {0}")]
    MissingColumn(String),

    #[error("unsupported state: {0}")]
    UnsupportedState(String),

    #[error("dual certificate is degenerate at n1 = n2 = 0")]
    DegenerateDual,

    #[error("empty input")]
    EmptyInput,

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("protocol aborted: declared transmissivity {eta} is below the minimum {eta_min}")]
    AbortLoss { eta: f64, eta_min: f64 },

    #[error("protocol failure: {0}")]
    ProtocolFailure(String),

    #[error("requested {requested} samples exceeds the cap of {cap}")]
    ResourceExhausted { requested: u64, cap: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NotPhysical(_) => "not-physical",
            Error::DegenerateAuxiliary(_) => "degenerate-auxiliary",
            Error::NoSignal(_) => "no-signal",
            Error::MissingColumn(_) => "missing-column",
            Error::UnsupportedState(_) => "unsupported-state",
            Error::DegenerateDual => "degenerate-dual",
            Error::EmptyInput => "empty-input",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::AbortLoss { .. } => "abort-loss",
            Error::ProtocolFailure(_) => "protocol-failure",
            Error::ResourceExhausted { .. } => "resource-exhausted",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
