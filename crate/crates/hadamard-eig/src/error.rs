//! Crate-wide error type and result alias.

use thiserror::Error;

use crate::mesh::Violation;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library and CLI.
///
/// `exit_code` partitions the variants into the process exit conventions of
/// the command-line tool: usage/configuration problems exit 2, numerical
/// domain failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("mesh parse error at line {line}: {msg}")]
    MeshParse { line: usize, msg: String },

    #[error("mesh failed validation with {} violation(s); first: {first}", .violations.len())]
    MeshInvalid {
        violations: Vec<Violation>,
        first: String,
    },

    #[error("invalid argument: {0}")]
    InvalidParam(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("deformation singular at x = ({}, {}), t = {t}: det DT = {det:.3e}", .x[0], .x[1])]
    SingularDeformation { x: [f64; 2], t: f64, det: f64 },

    #[error("t = {t} outside the family's validity range ({lo}, {hi})")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("no free degrees of freedom (every vertex lies on the Dirichlet boundary)")]
    EmptyFreeSet,

    #[error("matrix not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:.3e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("singular corrector system (smallest pivot {pivot:.3e})")]
    SingularSystem { pivot: f64 },

    #[error("rank-deficient input: column {column} is dependent on its predecessors")]
    RankDeficient { column: usize },

    #[error("sample grid too coarse: adjacent nodes {node_a} and {node_b} both carry swap events in one cluster range")]
    GridTooCoarse { node_a: usize, node_b: usize },
}

impl Error {
    /// Builds the mesh-validation error from a non-empty violation list.
    pub fn mesh_invalid(violations: Vec<Violation>) -> Self {
        let first = violations
            .first()
            .map(|v| v.to_string())
            .unwrap_or_else(|| "unknown".to_owned());
        Error::MeshInvalid { violations, first }
    }

    /// Process exit code the CLI maps this error to.
    ///
    /// 2 = usage or configuration problem, 3 = numerical domain failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Json(_)
            | Error::MeshParse { .. }
            | Error::MeshInvalid { .. }
            | Error::InvalidParam(_)
            | Error::Config(_)
            | Error::DimensionMismatch(_) => 2,
            Error::SingularDeformation { .. }
            | Error::OutOfRange { .. }
            | Error::EmptyFreeSet
            | Error::NotSpd(_)
            | Error::ConvergenceFailure { .. }
            | Error::SingularSystem { .. }
            | Error::RankDeficient { .. }
            | Error::GridTooCoarse { .. } => 3,
        }
    }
}
