use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        got: usize,
    },

    #[error("oracle `{oracle}` returned a non-finite value")]
    NonFinite { oracle: String },

    #[error("oracle `{oracle}` is tagged {tag} but {detail}")]
    CurvatureTag {
        oracle: String,
        tag: String,
        detail: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("point outside the domain of `{oracle}`")]
    Domain { oracle: String },

    #[error("program is infeasible (minimized phase-one slack {slack:.3e})")]
    Infeasible { slack: f64 },

    #[error("solver stopped with status {status:?} after {iters} iterations")]
    NotOptimal {
        status: crate::solver::SolveStatus,
        iters: usize,
    },

    #[error("stage {t}: {source}")]
    Stage {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {index}: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_stage(self, t: usize) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                t,
                source: Box::new(e),
            },
        }
    }

    pub fn at_replication(self, index: usize) -> Self {
        Error::Replication {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn dim(field: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            field: field.into(),
            expected,
            got,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
