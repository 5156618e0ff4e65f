//! Referring-expression segmentation: an LSTM-CNN pipeline whose
//! expression-conditioned foreground map is mixed with a category-fusion
//! map by a learned weight α.
//!
//! Everything runs in `f64` on the CPU with hand-written forward and
//! backward passes.

pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pnm;
pub mod segment;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::CheckpointError;
pub use embedding::{cosine_similarity, EmbeddingError, EmbeddingTable};
pub use encoder::{
    classify, encode, tokenize, ClassDistribution, ClassifierParams, EncoderError, LstmParams,
    TokenSequence,
};
pub use metrics::{iou, overall_iou, precision_at, IoUStat, MetricsError, MetricsReport};
pub use model::{Model, ModelConfig, Paths, Prediction};
pub use pnm::PnmError;
pub use segment::{
    binarize, combine, fuse, upsample_bilinear, BinaryMask, FeatureMap, ForegroundMap,
    FusionWeight, Image, ProbabilityMap, SegmentError,
};
pub use synth::{ClassCatalog, Sample, SynthError};
pub use train::{LrSchedule, TrainConfig, TrainData, TrainHistory};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{}: {source}", path.display())]
    AtPath { path: PathBuf, source: Box<Error> },
    #[error("{0}")]
    Config(String),
    #[error("training diverged: parameters are no longer finite")]
    Diverged,
}
