use std::path::PathBuf;

use thiserror::Error;

use crate::data::{Label, Task};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed JSON at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("record {index}: field `{field}`: {message}")]
    Validation {
        index: usize,
        field: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough {label} demonstrations for {task}: need {required}, have {available}")]
    InsufficientPool {
        task: Task,
        label: Label,
        required: usize,
        available: usize,
    },

    #[error("demonstration {demo_id} is a {demo_task} point but the target is {target_task}")]
    TaskMismatch {
        demo_id: String,
        demo_task: Task,
        target_task: Task,
    },

    #[error("demonstration {0} has no rationale but chain-of-thought is enabled")]
    MissingRationale(String),

    #[error("empty rationale returned for demonstration {0}")]
    EmptyRationale(String),

    #[error("endpoint {model_id} failed after {attempts} attempt(s): {message}")]
    Endpoint {
        model_id: String,
        attempts: u32,
        message: String,
    },

    #[error("protocol error from {model_id}: {message}")]
    Protocol { model_id: String, message: String },

    #[error("no yes/no answer in completion {0:?}")]
    UnparseableAnswer(String),

    #[error("no yes/no alternatives among returned log-probabilities")]
    ProbabilityUnavailable,

    #[error("all {0} samples were unparseable")]
    Undecided(usize),

    #[error("unknown point id {0}")]
    UnknownPoint(String),

    #[error("point {0} has no gold label")]
    MissingGold(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("model {model} has no prediction for point {point}")]
    CoverageGap { model: String, point: String },

    #[error("model set mismatch: {0}")]
    KeyMismatch(String),

    #[error("no vote weights for task {0}")]
    MissingWeights(Task),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema mismatch at tensor `{tensor}`: {message}")]
    Schema { tensor: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classes used to derive process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Endpoint,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 1,
            ErrorClass::Endpoint => 2,
            ErrorClass::Internal => 3,
        }
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn validation(index: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            index,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Config(_)
            | Error::InsufficientPool { .. }
            | Error::TaskMismatch { .. }
            | Error::MissingRationale(_)
            | Error::UnknownPoint(_)
            | Error::MissingGold(_)
            | Error::UndefinedMetric(_)
            | Error::CoverageGap { .. }
            | Error::KeyMismatch(_)
            | Error::MissingWeights(_)
            | Error::Checkpoint(_)
            | Error::Schema { .. } => ErrorClass::Validation,
            Error::Endpoint { .. }
            | Error::Protocol { .. }
            | Error::EmptyRationale(_)
            | Error::UnparseableAnswer(_)
            | Error::ProbabilityUnavailable
            | Error::Undecided(_) => ErrorClass::Endpoint,
            Error::Stage { source, .. } => source.class(),
            Error::Io { .. } | Error::Json(_) => ErrorClass::Internal,
        }
    }
}
