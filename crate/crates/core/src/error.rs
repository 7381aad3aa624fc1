//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("degenerate cell {cell}: {reason}")]
    DegenerateCell { cell: usize, reason: String },

    #[error("refinement would produce cell diameter {would} below floor {floor}")]
    OverRefinement { would: f64, floor: f64 },

    #[error("vertex budget exceeded: refinement needs about {needed} vertices, limit is {limit}")]
    VertexBudget { needed: usize, limit: usize },

    #[error("linear solver failed: {reason} (iterations {iterations}, residual {residual:.3e})")]
    Solver {
        reason: String,
        iterations: usize,
        residual: f64,
    },

    #[error("SCF did not converge in {iterations} iterations (|dE| = {delta_e:.3e})")]
    NonConvergence { iterations: usize, delta_e: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
