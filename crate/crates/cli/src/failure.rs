use serde::Serialize;
use std::fmt;

/// What went wrong, which decides the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Bad arguments or configuration.
    Usage,
    /// Missing, unreadable or malformed input files.
    Data,
    /// A pipeline stage rejected otherwise readable data.
    Stage,
}

impl FailureKind {
    pub fn exit_code(self) -> u8 {
        match self {
            FailureKind::Usage => 1,
            FailureKind::Data => 2,
            FailureKind::Stage => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    /// Stage or step the failure happened in.
    pub stage: String,
    pub source: anyhow::Error,
}

impl Failure {
    pub fn new(kind: FailureKind, stage: impl Into<String>, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            stage: stage.into(),
            source: source.into(),
        }
    }

    pub fn usage(stage: impl Into<String>, source: impl Into<anyhow::Error>) -> Self {
        Self::new(FailureKind::Usage, stage, source)
    }

    pub fn data(stage: impl Into<String>, source: impl Into<anyhow::Error>) -> Self {
        Self::new(FailureKind::Data, stage, source)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for Failure {}

/// Core errors about file contents are data errors; the rest come from stages.
pub fn core_kind(e: &panicle_core::Error) -> FailureKind {
    use panicle_core::Error as E;
    match e {
        E::Io { .. } | E::Parse { .. } | E::Json(_) | E::Image(_) => FailureKind::Data,
        _ => FailureKind::Stage,
    }
}

pub trait StageExt<T> {
    /// Tags a core error with the stage it came from.
    fn stage(self, stage: &str) -> Result<T, Failure>;
}

impl<T> StageExt<T> for panicle_core::Result<T> {
    fn stage(self, stage: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(core_kind(&e), stage, e))
    }
}

pub trait DataExt<T> {
    fn data(self, stage: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> DataExt<T> for Result<T, E> {
    fn data(self, stage: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::data(stage, e))
    }
}
