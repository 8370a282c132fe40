//! Error-to-exit-code mapping and machine-readable stderr payloads.
//!
//! Exit codes: 0 success, 2 usage error, 3 IO error, 4 backend failure,
//! 5 validation failure. Human-readable progress goes to stdout; errors go
//! to stderr as one JSON object.

use esd_distill::distill::DistillError;
use esd_distill::generate::GenerateError;
use esd_distill::jsonl::JsonlError;
use esd_distill::loss::LossError;
use esd_distill::mbr::MbrError;
use esd_distill::metaeval::MetaEvalError;
use esd_distill::prompt::UnknownTemplate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Backend,
    Validation,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Backend => 4,
            ErrorKind::Validation => 5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Backend => "backend",
            ErrorKind::Validation => "validation",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn stderr_json(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind.label(), "message": self.message }
        })
        .to_string()
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: ErrorKind::Io, message: e.to_string() }
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        let kind = match &e {
            JsonlError::Io { .. } => ErrorKind::Io,
            JsonlError::MalformedLine { .. } => ErrorKind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        let kind = match &e {
            GenerateError::GenerationFailure { .. } => ErrorKind::Backend,
            _ => ErrorKind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<MbrError> for CliError {
    fn from(e: MbrError) -> Self {
        Self { kind: ErrorKind::Validation, message: e.to_string() }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Jsonl(inner) => inner.into(),
            DistillError::Generate(inner) => inner.into(),
            DistillError::Mbr(inner) => inner.into(),
            other => Self { kind: ErrorKind::Validation, message: other.to_string() },
        }
    }
}

impl From<MetaEvalError> for CliError {
    fn from(e: MetaEvalError) -> Self {
        Self { kind: ErrorKind::Validation, message: e.to_string() }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        Self { kind: ErrorKind::Validation, message: e.to_string() }
    }
}

impl From<UnknownTemplate> for CliError {
    fn from(e: UnknownTemplate) -> Self {
        Self { kind: ErrorKind::Validation, message: e.to_string() }
    }
}
