use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter fell outside the domain where a formula is defined.
    /// `constraint` is the violated inequality written out with operand values,
    /// e.g. `alpha < alpha_max (alpha = 2, alpha_max = 1.333)`.
    #[error("parameter out of domain in {op}: requires {constraint}")]
    Domain { op: &'static str, constraint: String },

    /// A documented precondition of an operation does not hold.
    #[error("precondition failed in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    #[error("matrix is numerically singular or not positive definite in {op}")]
    Singular { op: &'static str },

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("certificate was rejected by the stability test; refusing to build a privatizer")]
    RejectedCertificate,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, constraint: impl Into<String>) -> Self {
        Error::Domain {
            op,
            constraint: constraint.into(),
        }
    }

    pub(crate) fn precondition(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            detail: detail.into(),
        }
    }
}
