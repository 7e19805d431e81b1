//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by samplers, training, density evaluation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient component in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("ODE state became non-finite at t = {t}")]
    OdeDiverged { t: f64 },

    #[error("non-finite estimator term for sample {index} of chain {chain}: {detail}")]
    NonFiniteTerm {
        chain: usize,
        index: usize,
        detail: String,
    },

    #[error("variance estimate unavailable: {n_chains} chain(s), need at least 2")]
    VarianceUnavailable { n_chains: usize },

    #[error("ensemble mixing failure: no proposal accepted for {sweeps} consecutive sweeps")]
    MixingFailure { sweeps: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
