//! Config-driven orchestration: per-year analysis, cross-year comparison and
//! synthetic capture generation.

mod analyze;
mod compare;
mod config;
mod synth;

pub use analyze::{cmd_analyze, process_file, AnalyzeSummary, FilePartial};
pub use compare::{cmd_compare, CompareSummary, COMPARE_DIR};
pub use config::{IdsSection, RunConfig, YearConfig, YearSource, DEFAULT_CAP};
pub use synth::{cmd_synth, resolve_spec, SynthOutput};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input glob '{0}' matched no files")]
    NoMatch(String),
    #[error("cannot read input {path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("no usable packets: {0}")]
    Empty(String),
    #[error("missing artifact {0} (rerun analyze or enable rebuild)")]
    MissingArtifact(PathBuf),
    #[error("output error at {path}: {reason}")]
    Output { path: PathBuf, reason: String },
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::NoMatch(_) | PipelineError::Input { .. } => 3,
            PipelineError::Empty(_) => 4,
            PipelineError::MissingArtifact(_) => 5,
            PipelineError::Output { .. } | PipelineError::Other(_) => 1,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        PipelineError::Output {
            path: path.into(),
            reason: e.to_string(),
        }
    }
}
