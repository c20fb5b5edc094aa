use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cluster {cluster} has no retained members after outlier removal")]
    ClusterFullyDiscarded { cluster: usize },

    #[error("least squares for moment order {order} is underdetermined: {clusters} clusters for {unknowns} unknowns")]
    Underdetermined {
        order: usize,
        clusters: usize,
        unknowns: usize,
    },

    #[error("energy increased for {consecutive} consecutive iterations (trace: {trace:?})")]
    Diverged { consecutive: usize, trace: Vec<f64> },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(std::path::PathBuf),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
