use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum PiiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },

    #[error("non-numeric cell at ({row},{col}): {value:?}")]
    NonNumeric {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("unknown control {0:?}")]
    UnknownControl(String),

    #[error("empty complement: every outcome is declared a control")]
    EmptyComplement,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("zero matrix after preprocessing")]
    ZeroMatrix,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("fold {fold} has {size} training rows, learner needs at least {needed}")]
    FoldTooSmall {
        fold: usize,
        size: usize,
        needed: usize,
    },

    #[error("inapplicable: {0}")]
    Inapplicable(String),

    #[error("model inconsistency: residual norm {0:e} exceeds tolerance")]
    Inconsistent(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PiiError {
    /// True for errors caused by bad inputs or configuration rather than
    /// by a numerical failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PiiError::Dimension(_)
                | PiiError::NonFinite { .. }
                | PiiError::NonNumeric { .. }
                | PiiError::UnknownControl(_)
                | PiiError::EmptyComplement
                | PiiError::Invalid(_)
                | PiiError::Config(_)
                | PiiError::Io(_)
                | PiiError::Csv(_)
                | PiiError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, PiiError>;
