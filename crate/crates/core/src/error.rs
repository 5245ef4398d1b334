use std::path::PathBuf;

use thiserror::Error;

use crate::data::{DomainId, ExamineeId, QuestionId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: invalid record: {message}")]
    InvalidRecord {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown question {question:?} in domain {domain:?}")]
    UnknownQuestion { domain: DomainId, question: QuestionId },

    #[error("unknown domain {0:?}")]
    UnknownDomain(DomainId),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("{stage} diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("need at least 2 eligible examinees for a cold-start split, found {0}")]
    TooFewExaminees(usize),

    #[error("examinee {0:?} has no source-domain ability")]
    NoSourceAbility(ExamineeId),

    #[error("missing source ability for domain {0:?}")]
    MissingSource(DomainId),

    #[error("{0} is undefined: labels contain a single class")]
    UndefinedMetric(&'static str),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("maximum Fisher information selection requires an IRT model")]
    FisherNeedsIrt,

    #[error("grid cell needs a trained artifact for {0}")]
    MissingArtifact(String),

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
