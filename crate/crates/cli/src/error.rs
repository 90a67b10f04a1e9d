use std::fmt;
use std::process::ExitCode;

use shapnas::analysis::AnalysisError;
use shapnas::protocol::ProtocolError;
use shapnas::search::SearchError;
use shapnas::space::SpaceError;
use shapnas::synthetic::GameSpecError;
use shapnas::{EvalError, GameError};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unreadable input; exit 2.
    Usage(String),
    /// The value function failed; exit 3.
    Evaluator(String),
    /// Input parsed but failed validation; exit 4.
    Validation(String),
    /// Writing results failed; exit 1.
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Output(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Evaluator(_) => 3,
            CliError::Validation(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Evaluator(m) => write!(f, "evaluator failure: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Output(m) => write!(f, "writing output: {m}"),
        }
    }
}

impl From<SpaceError> for CliError {
    fn from(e: SpaceError) -> Self {
        match e {
            SpaceError::Io { .. } | SpaceError::UnknownPreset(_) => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GameSpecError> for CliError {
    fn from(e: GameSpecError) -> Self {
        match e {
            GameSpecError::Io { .. } | GameSpecError::UnknownPreset(_) => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Evaluator(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluator(e.to_string())
    }
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        match e {
            GameError::Evaluation { .. } => CliError::Evaluator(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SearchError<f64>> for CliError {
    fn from(e: SearchError<f64>) -> Self {
        match &e {
            SearchError::Evaluator { checkpoint, .. } => {
                let mut msg = e.to_string();
                if let Some(path) = checkpoint {
                    msg.push_str(&format!(" (state saved to {})", path.display()));
                }
                CliError::Evaluator(msg)
            }
            SearchError::Io(_) => CliError::Output(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Eval(_) => CliError::Evaluator(e.to_string()),
            AnalysisError::Usage(_) => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}
