use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state id {0} out of range (n_states = {1})")]
    InvalidState(usize, usize),

    #[error("action id {0} out of range (n_actions = {1})")]
    InvalidAction(usize, usize),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A model or config failed one of its structural invariants. The
    /// string names the invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chain is not irreducible: {} recurrent classes {classes:?}", classes.len())]
    NotIrreducible { classes: Vec<Vec<usize>> },

    #[error("chain is periodic with period {period} (recurrent class {class:?})")]
    Periodic { period: usize, class: Vec<usize> },

    #[error("mixing time exceeds cap of {cap} steps")]
    MixingCapExceeded { cap: u64 },

    #[error("gradient is not in the range of the Fisher matrix (residual {residual:.3e})")]
    OutsideFisherRange { residual: f64 },

    #[error("linear program infeasible: {constraint}")]
    Infeasible { constraint: String },

    #[error("linear program unbounded")]
    Unbounded,

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("transition has no next action (a_next) attached")]
    MissingNextAction,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
