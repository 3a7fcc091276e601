//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, training, data handling, and attacks.
#[derive(Debug, Error)]
pub enum Error {
    /// Adjacent layer widths do not chain, or an array has the wrong shape.
    #[error("width mismatch at layer {first}\u{2192}{second}: out_width {out} != in_width {inp}")]
    WidthMismatch {
        first: usize,
        second: usize,
        out: usize,
        inp: usize,
    },

    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("split {0:?} is missing or empty")]
    EmptySplit(String),

    #[error("checkpoint parse error at byte offset {offset}: {message}")]
    CheckpointParse { offset: u64, message: String },

    #[error("checkpoint structure error: {0}")]
    CheckpointStructure(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("csv parse error at row {row}, column {col}: {message}")]
    CsvCell {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("attack error: {0}")]
    Attack(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
