use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gradient tape was never filled by a forward pass")]
    MissingTape,

    #[error("gradient tape was filled by a network with a different layout")]
    StaleTape,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("slot {slot} out of range for outer variable of dimension {dim}")]
    SlotOutOfRange { slot: usize, dim: usize },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid box constraint: lo {lo} > hi {hi}")]
    InvalidBox { lo: f64, hi: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("rounds must be strictly increasing: got {got} after {prev}")]
    OutOfOrder { prev: u64, got: u64 },

    #[error("outer variable diverged at round {round}")]
    Diverged { round: u64 },

    #[error("ledger parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            expected,
            got,
        })
    }
}
