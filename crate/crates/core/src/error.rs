use thiserror::Error;

/// Errors raised by the network, controller and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Array lengths or matrix shapes disagree with the network layout.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    /// A block produced NaN or infinity during a forward pass.
    #[error("numerical overflow in block {block}")]
    Overflow { block: usize },

    /// The closed-loop state left the finite range.
    #[error("simulation diverged at t = {t:.4} s (|x| = {state_norm:e})")]
    Divergence { t: f64, state_norm: f64 },

    #[error("every run in the batch diverged ({runs} runs)")]
    AllDiverged { runs: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
