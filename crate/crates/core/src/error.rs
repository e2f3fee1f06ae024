use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient tape has already been replayed")]
    TapeConsumed,

    #[error("no forward record for quantizer backward")]
    MissingForward,

    #[error("value {value} at index {index} is off the quantizer grid (step {alpha}, offset {beta})")]
    OffGrid {
        index: usize,
        value: f64,
        alpha: f64,
        beta: f64,
    },

    #[error("activation site(s) not quantized: {0}")]
    UnquantizedSite(String),

    #[error("expected a {expected} checkpoint, found {found}")]
    Mode {
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("{path}: row {row}, column {col}: cannot parse {cell:?} as a number")]
    Csv {
        path: String,
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("{path}: {message}")]
    CsvFormat { path: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
