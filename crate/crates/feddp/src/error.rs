use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedDpError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("bad IDX magic number in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("truncated IDX payload in {path}: expected {expected} bytes, got {got}")]
    TruncatedIdx {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("Gaussian mechanism requires delta > 0")]
    GaussianDeltaZero,
    #[error("noise-free constants: the optimal iteration count is unbounded")]
    UnboundedIterations,
    #[error("local fit for client {client} did not converge (gradient norm {grad_norm:.3e})")]
    LocalFitNotConverged { client: usize, grad_norm: f64 },
    #[error("federation aborted at round {round}: {source}")]
    RoundFailed {
        round: usize,
        source: Box<FedDpError>,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedDpError>;
