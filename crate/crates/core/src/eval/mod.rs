//! Benchmarks over trained embeddings.

pub mod csv;
pub mod downstream;
pub mod hit_rate;
pub mod metrics;
pub mod neighbours;
pub mod pairs;
pub mod reliability;
pub mod tsne;

use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("neighbourhood size {l} outside [1, {max}]")]
    NeighbourhoodOutOfRange { l: usize, max: usize },
    #[error("no evaluable pairs")]
    NoEvaluablePairs,
    #[error("no positive labels")]
    NoPositives,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate task: {positives} positive and {negatives} negative patients")]
    DegenerateTask { positives: usize, negatives: usize },
    #[error("unknown target code {0:?}")]
    UnknownTarget(String),
    #[error("perplexity {perplexity} too large for {n} points (must be < {})", (*n as f64 - 1.0) / 3.0)]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("non-finite value during {0}")]
    NonFinite(&'static str),
    #[error("malformed code {0:?}: expected a letter followed by two digits")]
    MalformedCode(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("run {run}: {source}")]
    Run { run: usize, source: Box<EvalError> },
    #[error("empty subsample: {0}")]
    EmptySubsample(String),
    #[error("no code pair is present in every run's vocabulary")]
    EmptyIntersection,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
