use std::fmt;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad arguments, configuration or input files.
    Validation,
    /// A failure while running the pipeline.
    Runtime,
    /// `--strict` evaluation with a metric that could not be computed.
    StrictMetricMissing,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Validation => 1,
            ExitKind::Runtime => 2,
            ExitKind::StrictMetricMissing => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::Validation, message: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::Runtime, message: msg.into() }
    }

    pub fn strict(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::StrictMetricMissing, message: msg.into() }
    }

    pub fn context(self, what: &str) -> Self {
        Self { kind: self.kind, message: format!("{what}: {}", self.message) }
    }

    pub fn code(&self) -> i32 {
        self.kind.code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<themeforge::Error> for CliError {
    fn from(e: themeforge::Error) -> Self {
        use themeforge::Error as E;
        let kind = match e {
            E::InvalidInput(_) | E::Config(_) | E::ShapeMismatch { .. } | E::Format { .. } => ExitKind::Validation,
            E::Unavailable(_) => ExitKind::StrictMetricMissing,
            _ => ExitKind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
