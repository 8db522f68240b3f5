use thiserror::Error;

/// Errors produced anywhere in the cubature pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no degree-{degree} construction implemented for driving dimension {dim}")]
    UnsupportedDimension { degree: usize, dim: usize },

    #[error("expected-signature level {0} exceeds the supported maximum of 8")]
    LevelTooLarge(usize),

    #[error("index {index} out of range for formula with {paths} paths")]
    IndexOutOfRange { index: usize, paths: usize },

    #[error("cubature tree with {paths}^{depth} leaves exceeds the 2^40 guard")]
    TreeTooLarge { paths: usize, depth: usize },

    #[error("support of size {support} admits no null vector for {constraints} constraints")]
    NoNullVector { support: usize, constraints: usize },

    #[error("surviving support point matches no tree prefix at interval {interval}")]
    MatchFailure { interval: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state left the finite range at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("weight table does not match the supplied inputs: {0}")]
    ManifestMismatch(String),

    #[error("no oracle value available for this configuration")]
    OracleUnavailable,

    #[error("diffusion is singular at t = {t}")]
    SingularDiffusion { t: f64 },

    #[error("non-finite gradient component {index}")]
    NonFiniteGradient { index: usize },

    #[error("loss {loss} exceeded the divergence threshold at epoch {epoch}")]
    DivergenceDetected { epoch: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
