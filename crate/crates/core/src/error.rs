use flowstrike_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("pair {index} violates the perturbation bound: L-inf {distance} > epsilon {epsilon}")]
    PairBound {
        index: usize,
        distance: f32,
        epsilon: f32,
    },
    #[error("query budget of {0} exhausted")]
    BudgetExceeded(u64),
    #[error("training diverged at iteration {iteration} ({what})")]
    Diverged { iteration: usize, what: String },
    #[error("no successful adversarial examples were collected")]
    NoPairs,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
