use std::fmt::Display;

use imcot_core::datagen::DatagenError;
use imcot_core::embedding::EmbedError;
use imcot_core::eval::EvalError;
use imcot_core::reward::RewardError;
use imcot_core::rollout::RolloutError;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Input,
    /// An external service could not be reached.
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Input, message: e.to_string() }
    }

    pub fn environment(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Environment, message: e.to_string() }
    }

    pub fn usage(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Usage, message: e.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Input => 1,
            ErrorKind::Environment => 2,
        }
    }

    pub fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Input => "input",
            ErrorKind::Environment => "environment",
        };
        json!({ "error": kind, "message": self.message }).to_string()
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::ServiceUnavailable(_) => CliError::environment(e),
            other => CliError::input(other),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Embed(inner) => inner.into(),
            other => CliError::input(other),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        if e.is_environment() {
            CliError::environment(e)
        } else {
            CliError::input(e)
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::GeneratorUnavailable(_) => CliError::environment(e),
            other => CliError::input(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::JudgeUnavailable(_) => CliError::environment(e),
            other => CliError::input(other),
        }
    }
}
