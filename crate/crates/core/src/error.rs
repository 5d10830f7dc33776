use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input contains no interactions")]
    EmptyInput,

    #[error("user {user} has only {available} non-interacted items, {required} evaluation negatives required")]
    NegativePoolTooSmall {
        user: String,
        available: usize,
        required: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown {kind} index {index} (valid range 0..{bound})")]
    UnknownIndex {
        kind: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("unknown user id {id:?}; {valid}")]
    UnknownUser { id: String, valid: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, instance {instance}: logit {logit}")]
    Diverged {
        epoch: usize,
        instance: usize,
        logit: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
