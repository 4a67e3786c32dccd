use thiserror::Error;

use crate::quad_dynamics::QuadState;

/// Errors produced anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-finite value produced in layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("simulation diverged")]
    SimulationDiverged { prior: Box<QuadState> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown pair id {0}")]
    UnknownPair(u64),

    #[error("pair {0} has already been answered")]
    DuplicateLabel(u64),

    #[error("preference budget of {0} labels is exhausted")]
    BudgetExhausted(usize),

    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
