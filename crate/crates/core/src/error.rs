//! Top-level error type for running the pipeline.

use thiserror::Error;

use crate::config::ConfigError;
use crate::dataset::DatasetError;
use crate::metrics::MetricsError;
use crate::pose_graph::PoseGraphError;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("pose graph: {0}")]
    PoseGraph(#[from] PoseGraphError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pipeline: {0}")]
    Pipeline(String),
}

impl SlamError {
    pub fn io(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> SlamError {
        let path = path.as_ref().display().to_string();
        move |source| SlamError::Io { path, source }
    }
}
