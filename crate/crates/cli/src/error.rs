use std::fmt;

use icbench_client::ClientError;
use icbench_core::api::ErrorKind;
use icbench_core::dataset::DatasetError;
use icbench_core::gateway::GatewayError;
use icbench_core::head::{CheckpointError, TrainError};
use icbench_core::jsonl::JsonlError;
use icbench_core::pipeline::PipelineError;
use icbench_core::report::ReportError;
use icbench_core::subjective::RatingsError;
use icbench_service::StudyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Validation = 2,
    Transport = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Validation,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Internal,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        let exit = match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => Exit::Validation,
            _ => Exit::Internal,
        };
        Self {
            exit,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn with(exit: Exit, e: impl ToString) -> CliError {
    CliError {
        exit,
        message: e.to_string(),
    }
}

fn jsonl_exit(e: &JsonlError) -> Exit {
    match e {
        JsonlError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => Exit::Internal,
        _ => Exit::Validation,
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        with(jsonl_exit(&e), e)
    }
}

impl From<RatingsError> for CliError {
    fn from(e: RatingsError) -> Self {
        match e {
            RatingsError::Jsonl(j) => j.into(),
            other => with(Exit::Validation, other),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Jsonl(j) => j.into(),
            other => with(Exit::Validation, other),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        with(Exit::Validation, e)
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let exit = match &e {
            GatewayError::Transport { .. } | GatewayError::Protocol(_) => Exit::Transport,
            GatewayError::Io { .. } => Exit::Internal,
            _ => Exit::Validation,
        };
        with(exit, e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(g) => g.into(),
            PipelineError::Jsonl(j) => j.into(),
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Io { path, source } => CliError::io(&path, source),
            e @ (PipelineError::Train(TrainError::Diverged { .. }) | PipelineError::Join(_)) => with(Exit::Internal, e),
            e @ PipelineError::Checkpoint(CheckpointError::Io { .. }) => with(Exit::Internal, e),
            other => with(Exit::Validation, other),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let exit = match &e {
            ClientError::Transport { .. } | ClientError::Protocol { .. } => Exit::Transport,
            ClientError::Api { error, .. } if error.kind == ErrorKind::Internal => Exit::Internal,
            ClientError::Api { .. } => Exit::Validation,
        };
        with(exit, e)
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        let exit = match &e {
            StudyError::Journal(_) => Exit::Internal,
            _ => Exit::Validation,
        };
        with(exit, e)
    }
}
