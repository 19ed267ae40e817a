use std::io;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {what} needs {needed} bytes, file has {len}")]
    Truncation { what: String, needed: u64, len: u64 },

    #[error("duplicate entry '{0}'")]
    DuplicateEntry(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input {}: {source}", path.display())]
    MissingInput {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] minima_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Machine-readable error document written to stderr by the CLI.
#[derive(Debug, Serialize)]
pub struct ErrorDocument {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl Error {
    pub fn kind(&self) -> &'static str {
        use minima_core::Error as C;
        match self {
            Error::Format(_) => "format_error",
            Error::Truncation { .. } => "truncation_error",
            Error::DuplicateEntry(_) => "duplicate_entry_error",
            Error::Usage(_) | Error::MissingInput { .. } => "usage_error",
            Error::Config(_) => "config_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
            Error::Core(e) => match e {
                C::Shape(_) => "shape_error",
                C::Index(_) => "index_error",
                C::Numerics(_) => "numerics_error",
                C::DegenerateReference => "degenerate_reference",
                C::Rank(_) => "rank_error",
                C::InfeasibleBudget { .. } => "infeasible_budget",
                C::UnreachableTarget { .. } => "unreachable_target",
                C::EmptyModel => "empty_model",
                C::PlanMismatch(_) => "plan_mismatch_error",
                C::DraftSupport(_) => "draft_support_error",
                C::OracleTooLarge(_) => "oracle_too_large",
                C::InvalidDistribution(_) => "invalid_distribution",
                C::InvalidArgument(_) => "invalid_argument",
            },
        }
    }

    /// 2 for usage problems (bad flags, bad config, missing inputs), 1 for
    /// failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::MissingInput { .. } => 2,
            _ => 1,
        }
    }

    pub fn document(&self) -> ErrorDocument {
        ErrorDocument {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}
