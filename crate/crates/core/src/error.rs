use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("signal_too_short: {len} samples, window needs {window}")]
    SignalTooShort { len: usize, window: usize },
    #[error("too_many_mels: {n_mels} filters for {n_bins} FFT bins")]
    TooManyMels { n_mels: usize, n_bins: usize },
    #[error("invalid_params: {0}")]
    InvalidParams(String),
    #[error("empty_sequence: {0}")]
    EmptySequence(String),
    #[error("zero_vector: cosine similarity undefined")]
    ZeroVector,
    #[error("degenerate_scores: association scores have zero spread")]
    DegenerateScores,
    #[error("insufficient_targets: need at least 3 targets, got {0}")]
    InsufficientTargets(usize),
    #[error("non_finite: {0}")]
    NonFinite(String),
    #[error("dimension_mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("invalid_config: {0}")]
    InvalidConfig(String),
    #[error("empty_corpus")]
    EmptyCorpus,
    #[error("over_pruning: {0}")]
    OverPruning(String),
    #[error("unsorted_records: step {next} follows step {prev}")]
    UnsortedRecords { prev: u64, next: u64 },
    #[error("empty_input: {0}")]
    EmptyInput(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
