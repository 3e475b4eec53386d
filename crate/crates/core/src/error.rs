use thiserror::Error;

/// Errors raised by the numeric core, the models and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("degenerate row {row} in {op}: every entry is masked")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("infeasible alignment: {frames} frames cannot emit {tokens} tokens with {repeats} adjacent repeats")]
    InfeasibleAlignment {
        frames: usize,
        tokens: usize,
        repeats: usize,
    },
    #[error("degenerate weights: sum {sum:e} is not positive")]
    DegenerateWeights { sum: f64 },
    #[error("degenerate vector: row {row} of {which} has zero norm")]
    DegenerateVector { which: &'static str, row: usize },
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
