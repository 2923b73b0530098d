use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("invalid quantizer model: {0}")]
    InvalidModel(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("ill-conditioned scenario (condition number {cond:.3e}): {context}")]
    IllConditioned { cond: f64, context: String },

    #[error("first-order approximation out of range: information matrix is not positive definite")]
    ApproxOutOfRange,

    #[error("too few training samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("rate {rate} exceeds the training cap of {cap} bits")]
    RateAboveCap { rate: u32, cap: u32 },

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("too many allocation candidates ({count}, limit {limit})")]
    TooManyCandidates { count: u128, limit: u128 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::DimensionMismatch { .. }
                | Error::InvalidGeometry(_)
                | Error::InvalidRate(_)
                | Error::TooFewSamples { .. }
                | Error::RateAboveCap { .. }
                | Error::TooManyCandidates { .. }
        )
    }
}
