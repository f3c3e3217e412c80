use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("activation argument {0} lies outside [-1, 1]")]
    OutOfDomain(f64),

    #[error("token at level {level}, node {node} has probability zero under the policy")]
    ZeroProbability { level: usize, node: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("level {level} is out of range for a task with {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("exact enumeration needs {needed} evaluations, above the cap of {cap}")]
    BudgetExceeded { needed: u128, cap: u128 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("hinge loss clipped at level {level}, node {node}: margin {margin}")]
    HingeClipped { level: usize, node: usize, margin: f64 },

    #[error("malformed chain: {0}")]
    MalformedChain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
