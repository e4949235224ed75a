use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("action dimension {index} value {value} outside bounds [{lo}, {hi}]")]
    ActionOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("discrete action {label} outside 0..{count}")]
    DiscreteOutOfRange { label: usize, count: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("{op} failed at step {step}: {source}")]
    AtStep {
        op: &'static str,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("value iteration did not converge: residual {residual} > tol {tol} after {iterations} sweeps")]
    NoConvergence {
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    #[error("objective or gradient evaluation returned non-finite values at iterate {iterate:?}")]
    Evaluation { iterate: Vec<f64> },

    #[error("training diverged at episode {episode}: {detail}")]
    Diverged { episode: usize, detail: String },

    #[error("initial state infeasible: constraint {index} residual {residual} > 0")]
    InfeasibleInitialState { index: usize, residual: f64 },

    #[error("no previous plan available for shift fallback")]
    NoPreviousPlan,

    #[error("activation swap: network has no {expected} hidden layer")]
    NoSwappableLayer { expected: &'static str },

    #[error("strategy enumeration exceeded budget: {count} candidates > cap {cap}")]
    EnumerationBudget { count: usize, cap: usize },

    #[error("all {count} candidate strategies failed to solve")]
    AllCandidatesFailed { count: usize },

    #[error("config invalid at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the operation name and step index it occurred at.
    pub fn at_step(self, op: &'static str, step: usize) -> Self {
        Error::AtStep {
            op,
            step,
            source: Box::new(self),
        }
    }
}
