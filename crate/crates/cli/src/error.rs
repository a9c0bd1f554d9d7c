use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}parse error: {message}", at(file, *line))]
    Parse {
        file: Option<String>,
        line: Option<usize>,
        message: String,
    },
    #[error("{}invalid scenario: {message}", at(file, *line))]
    Validation {
        file: Option<String>,
        line: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] sdfwd::Error),
    #[error("certificate failed: {0}")]
    CertificateFailed(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn at(file: &Option<String>, line: Option<usize>) -> String {
    match (file, line) {
        (Some(f), Some(l)) => format!("{f}:{l}: "),
        (Some(f), None) => format!("{f}: "),
        (None, Some(l)) => format!("line {l}: "),
        (None, None) => String::new(),
    }
}

/// Machine-readable form written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub status: &'static str,
    pub kind: &'static str,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

impl CliError {
    pub fn parse(line: Option<usize>, message: impl Into<String>) -> Self {
        Self::Parse {
            file: None,
            line,
            message: message.into(),
        }
    }

    pub fn validation(line: Option<usize>, message: impl Into<String>) -> Self {
        Self::Validation {
            file: None,
            line,
            message: message.into(),
        }
    }

    /// Attaches the scenario path to parse and validation errors.
    pub fn in_file(self, path: &Path) -> Self {
        let f = Some(path.display().to_string());
        match self {
            Self::Parse { line, message, .. } => Self::Parse { file: f, line, message },
            Self::Validation { line, message, .. } => Self::Validation { file: f, line, message },
            other => other,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// 2 validation, 3 divergence, 4 infeasible design or failed
    /// certificate, 5 I/O.
    pub fn exit_code(&self) -> u8 {
        use sdfwd::Error as E;
        match self {
            Self::Parse { .. } | Self::Validation { .. } => 2,
            Self::Io { .. } => 5,
            Self::CertificateFailed(_) => 4,
            Self::Core(e) => match e {
                E::Divergence { .. } => 3,
                E::InfeasibleDesign(_)
                | E::SmallGainViolated { .. }
                | E::NoStabilizingRate { .. }
                | E::NotPositiveDefinite { .. }
                | E::NotNegativeDefinite { .. }
                | E::SingularMatrix { .. } => 4,
                E::DimensionMismatch { .. }
                | E::InvalidPerturbation { .. }
                | E::InvalidArgument(_)
                | E::WindowNotCovered { .. } => 2,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        use sdfwd::Error as E;
        match self {
            Self::Parse { .. } => "parse",
            Self::Validation { .. } => "validation",
            Self::Io { .. } => "io",
            Self::CertificateFailed(_) => "certificate_failed",
            Self::Core(E::Divergence { .. }) => "divergence",
            Self::Core(E::NoStabilizingRate { .. }) => "no_stabilizing_rate",
            Self::Core(E::SmallGainViolated { .. }) => "small_gain_violated",
            Self::Core(_) if self.exit_code() == 4 => "infeasible_design",
            Self::Core(_) => "validation",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (file, line) = match self {
            Self::Parse { file, line, .. } | Self::Validation { file, line, .. } => (file.clone(), *line),
            _ => (None, None),
        };
        ErrorRecord {
            status: "error",
            kind: self.kind(),
            exit_code: self.exit_code(),
            file,
            line,
            message: self.to_string(),
        }
    }
}
