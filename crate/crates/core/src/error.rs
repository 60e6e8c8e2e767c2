use thiserror::Error;

/// Failures raised by tensor operations, model assembly and data handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate statistics in {op}: {detail}")]
    DegenerateStatistics { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sizing error: extents {height}x{width} must be multiples of {multiple}")]
    Sizing { height: usize, width: usize, multiple: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("class {class} ({name}) never appears; its frequency is undefined")]
    DegenerateFrequency { class: usize, name: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
