use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the horizon [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("signature dimension overflows for d={dim}, m={level}; largest usable level is {max_level}")]
    SignatureOverflow {
        dim: usize,
        level: usize,
        max_level: usize,
    },

    #[error("signature mismatch: ({d1}, {m1}) vs ({d2}, {m2})")]
    SignatureMismatch {
        d1: usize,
        m1: usize,
        d2: usize,
        m2: usize,
    },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite latent state at t={t} (sample {sample})")]
    NonFiniteLatent { t: f64, sample: usize },

    #[error("tape does not match the network it is replayed on: {0}")]
    StaleTape(String),

    #[error("loss undefined: path has no observation after t=0")]
    NoObservations,

    #[error("covariance not positive definite even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite training loss at epoch {epoch}; last good state saved to {}", checkpoint.display())]
    Diverged { epoch: usize, checkpoint: PathBuf },

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
