use std::fmt;

use serde::Serialize;

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Args,
    Load,
    Fit,
    Augment,
    Project,
    Infer,
    Simulate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Args => "args",
            Stage::Load => "load",
            Stage::Fit => "fit",
            Stage::Augment => "augment",
            Stage::Project => "project",
            Stage::Infer => "infer",
            Stage::Simulate => "simulate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Bad input: exit code 2.
    Validation,
    /// Numerical breakdown: exit code 3.
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn numerical(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind: ErrorKind::Numerical,
            message: message.into(),
        }
    }

    /// Wraps a core error, classifying it by its own validation flag.
    pub fn core(stage: Stage, e: fsc_core::Error) -> Self {
        if e.is_validation() {
            Self::validation(stage, e.to_string())
        } else {
            Self::numerical(stage, e.to_string())
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
        }
    }

    /// One-line JSON for `--json-errors`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Wire {
            error: self,
            exit_code: self.exit_code(),
        })
        .expect("error record serializes")
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a stage to core results.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> CliResult<T>;
}

impl<T> AtStage<T> for fsc_core::Result<T> {
    fn at(self, stage: Stage) -> CliResult<T> {
        self.map_err(|e| CliError::core(stage, e))
    }
}
