use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DoucError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DoucError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },

    #[error("tensor file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: bad magic, not a tensor file", .path.display())]
    BadMagic { path: PathBuf },

    #[error("{}: unsupported dtype tag {tag}", .path.display())]
    UnsupportedDtype { path: PathBuf, tag: u8 },

    #[error("{}: unsupported rank {rank} (expected 1..=4)", .path.display())]
    UnsupportedRank { path: PathBuf, rank: usize },

    #[error("{}: payload mismatch, header declares {expected} bytes but file holds {actual}", .path.display())]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest field `{field}`: {message}")]
    Manifest { field: String, message: String },

    #[error("manifest role `{role}`: {message}")]
    Role { role: String, message: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("[{stage}] {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DoucError>,
    },
}

/// Process exit codes used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Io = 3,
    Numeric = 4,
}

impl DoucError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DoucError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DoucError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, message: impl Into<String>) -> Self {
        DoucError::Manifest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn role(role: impl Into<String>, message: impl Into<String>) -> Self {
        DoucError::Role {
            role: role.into(),
            message: message.into(),
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        match self {
            DoucError::Stage { source, .. } => source.exit_kind(),
            DoucError::Config { .. } | DoucError::Manifest { .. } | DoucError::Role { .. } => ExitKind::Config,
            DoucError::MissingFile(_)
            | DoucError::BadMagic { .. }
            | DoucError::UnsupportedDtype { .. }
            | DoucError::UnsupportedRank { .. }
            | DoucError::PayloadMismatch { .. }
            | DoucError::Io { .. } => ExitKind::Io,
            DoucError::Shape { .. } | DoucError::Degenerate { .. } => ExitKind::Numeric,
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &DoucError {
        match self {
            DoucError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| DoucError::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        })
    }
}
