use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("non-positive size component: {0:?}")]
    NonPositiveSize([f64; 3]),
    #[error("cardinality mismatch: {left} vs {right}")]
    CardinalityMismatch { left: usize, right: usize },
    #[error("matching matrix row {row} violates the simplex: {detail}")]
    SimplexViolation { row: usize, detail: String },
    #[error("no RANSAC consensus: best inlier count {best} < {required}")]
    NoConsensus { best: usize, required: usize },
    #[error("no inliers in mask")]
    NoInliers,
    #[error("unknown init scheme `{0}`")]
    UnknownScheme(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("divergence: total loss {current:.3e} exceeds 10x initial {initial:.3e}")]
    Divergence { initial: f64, current: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("identifier mismatch: {0}")]
    IdentifierMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
