//! Experiment harness: configuration, embedding containers, pretraining and
//! compression trajectories, reports.

pub mod config;
pub mod container;
mod experiment;
mod pretrain;
pub mod record;

pub use config::{
    CompressionConfig, CorpusConfig, ExperimentConfig, ModelChoice, PretrainConfig, CHECKPOINT_GRID, PRETRAIN_STEPS, SCHEMA_VERSION,
};
pub use container::{
    decode_container, encode_container, read_container, write_container, EmbeddingTensor, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use experiment::{build_corpora, evaluate_corpora, extract, load_bias_test, pooled_waveforms, write_corpora, Study, WEIGHT_GRID};
pub use pretrain::{pretrain, pretraining_set, PretrainData, PretrainOptions};
pub use record::{
    read_records_csv, records_from_csv, records_to_csv, report, summarize, validate_records, write_records_csv, CategoryBias,
    ReportSummary, SeriesSummary, TrajectoryRecord,
};
