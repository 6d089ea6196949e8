use std::path::PathBuf;

/// Every failure the lab can surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate batch: channel {channel} has {count} element(s), need at least 2")]
    DegenerateBatch { channel: usize, count: usize },

    #[error("index error: label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate weights: {0} has zero norm")]
    DegenerateWeights(String),

    #[error("divergence at step {step}: {what}")]
    Divergence { step: u64, what: String },

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("label error: label {label} out of range for {classes} classes")]
    LabelRange { label: u8, classes: usize },

    #[error("tuner error: {0}")]
    Tuner(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, bad usage) rather than
    /// an internal failure. The CLI maps these to exit status 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
