use std::path::PathBuf;

use thiserror::Error;

use crate::features::FeatureError;
use crate::metrics::MetricsError;
use crate::pipeline::PipelineError;
use crate::tensor::TensorError;
use crate::transformer::TransformerError;
use crate::viz::VizError;
use crate::wsi::WsiError;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Wsi(#[from] WsiError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Wsi(_) => "wsi",
            Error::Features(_) => "features",
            Error::Transformer(_) => "transformer",
            Error::Pipeline(_) => "pipeline",
            Error::Metrics(_) => "metrics",
            Error::Viz(_) => "viz",
            Error::Io { .. } => "io",
            Error::Invalid(_) => "invalid",
        }
    }

    /// Line number for malformed JSON-lines inputs.
    pub fn line(&self) -> Option<usize> {
        match self {
            Error::Wsi(WsiError::Malformed { line, .. })
            | Error::Metrics(MetricsError::Malformed { line, .. })
            | Error::Features(FeatureError::Wsi(WsiError::Malformed { line, .. })) => Some(*line),
            _ => None,
        }
    }
}
