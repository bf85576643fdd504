use thiserror::Error;

/// Crate-wide error type. Every fallible operation in the library reports
/// through this enum so that the CLI can map failure classes to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-operand structural violation (wrong rank, empty tensor,
    /// out-of-range column window, bad hyperparameter, ...).
    #[error("{op}: expected {expected}, got {actual}")]
    InvalidArgument {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// `log` was applied to a non-positive entry without a clamp floor.
    #[error("log: non-positive input {value} at flat index {index} (use log_clamped for clamped semantics)")]
    LogDomain { value: f64, index: usize },

    /// `backward` was called on a non-scalar node.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// The optimizer received a NaN/inf gradient for the named parameter.
    #[error("adam: non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    /// An encoder was handed data of the wrong width for its view.
    #[error("view {view}: expected {expected} columns, got {actual}")]
    ViewWidthMismatch {
        view: usize,
        expected: usize,
        actual: usize,
    },

    /// A loss term became NaN/inf during training.
    #[error("non-finite {term} loss in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        term: String,
    },

    /// Views of a multi-view dataset disagree on the number of rows.
    #[error("row count mismatch: view {view_a} has {rows_a} rows but view {view_b} has {rows_b}")]
    RowCountMismatch {
        view_a: usize,
        rows_a: usize,
        view_b: usize,
        rows_b: usize,
    },

    /// A CSV cell failed to parse as a number.
    #[error("{path}: row {row}, column {col}: cannot parse {token:?} as a number")]
    CsvParse {
        path: String,
        row: usize,
        col: usize,
        token: String,
    },

    /// A binary file (dataset or checkpoint) violated its format.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    /// A checkpoint does not match the dataset it is being applied to.
    #[error("checkpoint mismatch: {dimension} is {in_checkpoint} in the checkpoint but {in_dataset} in the dataset")]
    CheckpointMismatch {
        dimension: String,
        in_checkpoint: usize,
        in_dataset: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
