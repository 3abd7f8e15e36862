use std::fmt;
use std::path::Path;

use lift3d::datagen::{ClientError, DatagenError};
use lift3d::tensorfile::TensorFileError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Validation,
    Io,
    Remote,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Validation => 2,
            Kind::Io => 3,
            Kind::Remote => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Validation => "validation",
            Kind::Io => "io",
            Kind::Remote => "remote",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self { kind: Kind::Usage, message: msg.to_string() }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        Self { kind: Kind::Validation, message: msg.to_string() }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self { kind: Kind::Io, message: format!("{}: {err}", path.display()) }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "exit_code": self.kind.exit_code(),
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<TensorFileError> for CliError {
    fn from(e: TensorFileError) -> Self {
        let kind = match e {
            TensorFileError::Io { .. } | TensorFileError::Stream(_) => Kind::Io,
            _ => Kind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        Self { kind: Kind::Remote, message: e.to_string() }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Client(c) => c.into(),
            other => Self::validation(other),
        }
    }
}

/// Module errors that only arise from bad inputs.
macro_rules! validation_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::validation(e)
            }
        })*
    };
}

validation_from!(
    lift3d::geometry::GeometryError,
    lift3d::synthworld::SynthError,
    lift3d::extractor::ExtractError,
    lift3d::voxfield::FieldError,
    lift3d::localize::LocalizeError,
    lift3d::evalmetrics::MetricError,
    lift3d::navsim::NavError
);
