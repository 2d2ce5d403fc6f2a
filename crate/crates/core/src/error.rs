//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("invalid rank: {0}")]
    InvalidRank(String),

    #[error("construction is not certified critical: {0}")]
    NotCertifiedCritical(String),

    #[error("ill-conditioned basis change: {0}")]
    IllConditioned(String),

    #[error("no tightened critical point exists: {0}")]
    NoTightenedPointExists(String),

    #[error("not a critical point: {0}")]
    NotCritical(String),

    #[error("ambiguous projector diagonal: {0}")]
    AmbiguousProjector(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("degenerate basis completion: {0}")]
    DegenerateBasis(String),

    #[error("invalid pivot: {0}")]
    InvalidPivot(String),

    #[error("internal inconsistency: {0}")]
    InternalInconsistency(String),

    #[error("network too deep: {0}")]
    TooDeep(String),

    #[error("point is not in canonical form: {0}")]
    NeedsCanonicalization(String),

    #[error("point is not tightened: {0}")]
    NotTightened(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("optimizer diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for errors that signal a bug or a numerical breakdown rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::InternalInconsistency(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
