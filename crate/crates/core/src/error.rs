use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("reconstruction error: {0}")]
    Reconstruction(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape error at layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged{}: {message}", epoch_suffix(*.epoch))]
    TrainingDiverged { epoch: Option<usize>, message: String },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("solver did not converge: {0}")]
    Convergence(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// An error raised inside a named pipeline stage.
    #[error("{stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps `self` with a stage label; already-labeled errors keep their label.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Self::Stage { .. } => e,
            e => Self::Stage { stage: stage.to_string(), source: Box::new(e) },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn epoch_suffix(epoch: Option<usize>) -> String {
    epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default()
}
