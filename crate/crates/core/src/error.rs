use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ZslError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ZslError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("ill-conditioned input: {0}")]
    IllConditioned(String),

    #[error("unsupported embedding: {0}")]
    UnsupportedEmbedding(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("evaluation coverage: class {class} has no evaluated images")]
    EvaluationCoverage { class: usize },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("split role error: {0}")]
    SplitRole(String),

    #[error("incomplete observation: {0}")]
    IncompleteObservation(String),

    #[error("unknown method id `{0}`")]
    UnknownMethod(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: declared {what} {declared}, file has {found}", path.display())]
    FileDimension {
        path: PathBuf,
        what: &'static str,
        declared: usize,
        found: usize,
    },

    #[error("{}: label {label} at line {line} out of range for {classes} classes", path.display())]
    LabelRange {
        path: PathBuf,
        line: usize,
        label: usize,
        classes: usize,
    },

    #[error("{}: byte offset {offset}: {message}", path.display())]
    BinaryFormat {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("malformed model bytes at offset {offset}: {message}")]
    ModelFormat { offset: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ZslError {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ZslError::Contract(_) => "contract",
            ZslError::DimensionMismatch { .. } => "dimension_mismatch",
            ZslError::TrainingDiverged { .. } => "training_diverged",
            ZslError::DegenerateData(_) => "degenerate_data",
            ZslError::DegenerateInput(_) => "degenerate_input",
            ZslError::IllConditioned(_) => "ill_conditioned",
            ZslError::UnsupportedEmbedding(_) => "unsupported_embedding",
            ZslError::Configuration(_) => "configuration",
            ZslError::EvaluationCoverage { .. } => "evaluation_coverage",
            ZslError::ProtocolViolation(_) => "protocol_violation",
            ZslError::SplitRole(_) => "split_role",
            ZslError::IncompleteObservation(_) => "incomplete_observation",
            ZslError::UnknownMethod(_) => "unknown_method",
            ZslError::Parse { .. } => "parse",
            ZslError::FileDimension { .. } => "file_dimension",
            ZslError::LabelRange { .. } => "label_range",
            ZslError::BinaryFormat { .. } => "binary_format",
            ZslError::ModelFormat { .. } => "model_format",
            ZslError::Io { .. } => "io",
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        ZslError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ZslError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(ZslError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
