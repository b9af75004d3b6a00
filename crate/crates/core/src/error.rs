use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Pipeline stage a failure originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Gamma,
    Bernoulli,
    Gp,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Gamma => "gamma",
            StageTag::Bernoulli => "bernoulli",
            StageTag::Gp => "gp",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence failure: {message}")]
    Convergence {
        message: String,
        /// Objective values of the accepted iterations before giving up.
        trace: Vec<f64>,
    },

    #[error("linear algebra failure: {0}")]
    Decomposition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("unknown station `{0}`")]
    UnknownStation(String),

    #[error("duplicate record for station `{station}` on {date}")]
    DuplicateKey { station: String, date: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("hyperparameter grid exceeded {limit} points")]
    GridTooLarge { limit: usize },

    #[error("{stage} stage: {source}")]
    Stage {
        stage: StageTag,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn in_stage(self, stage: StageTag) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable kind used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Convergence { .. } => "convergence",
            Error::Decomposition(_) => "decomposition",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::MalformedRow { .. } => "malformed_row",
            Error::UnknownStation(_) => "unknown_station",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::InsufficientData(_) => "insufficient_data",
            Error::GridTooLarge { .. } => "grid_too_large",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Convergence { .. } | Error::Decomposition(_) | Error::GridTooLarge { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Data(_)
            | Error::MalformedRow { .. }
            | Error::UnknownStation(_)
            | Error::DuplicateKey { .. }
            | Error::InsufficientData(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
        }
    }
}
