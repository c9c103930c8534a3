use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid config `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("action index {index} out of range for prompt {prompt_id} with {len} actions")]
    ActionIndexOutOfRange { prompt_id: usize, index: usize, len: usize },

    #[error("action {index} of prompt {prompt_id} is masked out")]
    MaskedAction { prompt_id: usize, index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("group size {0} is too small, the estimator needs at least 2 responses")]
    GroupTooSmall(usize),

    #[error(
        "enumeration of {actions}^{group} tuples exceeds the bound of {bound}; use fewer actions or a smaller group"
    )]
    EnumerationTooLarge { actions: usize, group: usize, bound: u64 },

    #[error("missing metrics file for run `{run}` ({path})")]
    MissingMetrics { run: String, path: PathBuf },

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("no run directories given")]
    NoRuns,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(context: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Parses TOML; errors name the offending field path.
pub(crate) fn from_toml<T: serde::de::DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let reason = e.into_inner().message().to_string();
        if path == "." {
            Error::parse(context, reason)
        } else {
            Error::config(path, reason)
        }
    })
}
