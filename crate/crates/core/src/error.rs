use thiserror::Error;

/// Errors surfaced by the enhancement engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is numerically singular (condition estimate {condition:.3e})")]
    SingularMatrix { condition: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("channel {channel} has {len} samples, expected {expected}")]
    ChannelLengthMismatch {
        channel: usize,
        len: usize,
        expected: usize,
    },

    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("block has {frames} frames, need at least {min}")]
    BlockTooShort { frames: usize, min: usize },

    #[error("online WPE diverged at frequency {freq}; state was reset")]
    NumericalDivergence { freq: usize },

    #[error("diagonalizer initialization is rank deficient at frequency {freq}")]
    SingularInitialization { freq: usize },

    #[error("FastMNMF log-likelihood diverged at sweep {sweep}")]
    LikelihoodDiverged { sweep: usize },

    #[error("beamformer statistics are degenerate (trace {trace:.3e})")]
    DegenerateStatistics { trace: f64 },

    #[error("reference signal is silent")]
    SilentReference,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
