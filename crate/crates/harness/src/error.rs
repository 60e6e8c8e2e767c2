use thiserror::Error;

/// Harness failures, grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HarnessError {
    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numeric(_) => 4,
        }
    }
}

impl From<misra::Error> for HarnessError {
    fn from(e: misra::Error) -> Self {
        use misra::Error as E;
        match e {
            E::Config(_) | E::Contract(_) => HarnessError::Config(e.to_string()),
            E::DegenerateStatistics { .. } => HarnessError::Numeric(e.to_string()),
            E::Dimension { .. }
            | E::Sizing { .. }
            | E::Label(_)
            | E::DegenerateFrequency { .. }
            | E::Format(_)
            | E::Io(_) => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Data(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
