use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("zero extent: all points of the cloud coincide")]
    ZeroExtent,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("empty grid: all {dropped} points fell outside the grid region")]
    EmptyGrid { dropped: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("probability rows are not normalized: {0}")]
    NotNormalized(String),

    #[error("backward called before forward: no cached state")]
    MissingCache,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset must contain both bona fide and attack samples")]
    SingleClass,

    #[error("insufficient identities for class {class}: need {needed}, have {have}")]
    InsufficientIdentities {
        class: String,
        needed: usize,
        have: usize,
    },

    #[error("score set has no {0} entries")]
    EmptyClass(&'static str),

    #[error("invalid score set: {0}")]
    InvalidScores(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("voxel grid file: {0}")]
    GridFormat(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
