use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mandatory column is absent from a CSV header.
    #[error("format error: missing column `{column}`")]
    MissingColumn { column: String },

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse { line: u64, column: String, message: String },

    #[error("parse error at line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("coverage error: no prediction for ids {}", format_ids(.missing))]
    MissingPredictions { missing: Vec<u64> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_ids(ids: &[u64]) -> String {
    const SHOWN: usize = 20;
    let mut out = ids
        .iter()
        .take(SHOWN)
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        out.push_str(&format!(", ... ({} total)", ids.len()));
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
