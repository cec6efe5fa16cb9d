use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embryo `{0}` is referenced by a transfer event but missing from the records")]
    UnknownEmbryo(String),
    #[error("embryo `{0}` is both transferred and discarded")]
    TransferredAndDiscarded(String),
    #[error("embryo `{0}` appears in more than one transfer event")]
    DuplicateTransfer(String),
    #[error("transfer event for treatment `{treatment}` reports {heartbeats} heartbeats for {transferred} embryos")]
    TooManyHeartbeats {
        treatment: String,
        heartbeats: u32,
        transferred: usize,
    },
    #[error("transferred embryo `{0}` has no transfer protocol")]
    MissingProtocol(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty sequence for embryo `{0}`")]
    EmptySequence(String),
    #[error("focal plane {plane} has no frames in sequence `{embryo}`")]
    MissingFocalPlane { embryo: String, plane: usize },
    #[error("container error: {0}")]
    Container(String),
    #[error("need at least one positive and one negative label (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("need at least {required} examples per class (got {positives} positive, {negatives} negative)")]
    TooFewPerClass {
        required: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("samples overlap on id `{0}`; use the paired test")]
    OverlappingSamples(String),
    #[error("scored embryo sets differ: {0}")]
    ScoreSetMismatch(String),
    #[error("refusing to read ground-truth sidecar `{0}` as training input")]
    TruthLeak(PathBuf),
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
