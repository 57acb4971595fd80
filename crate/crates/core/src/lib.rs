//! Few-shot classification toolkit.
//!
//! Episodic sampling over class partitions, a batch-trained MLP encoder with
//! an auxiliary rotation loss, prototype and transductive decoders, a
//! late-fusion meta-ensemble, and a controller that trains several encoders
//! in parallel under a wall-clock budget.

pub mod controller;
pub mod dataset;
pub mod decoders;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod synthetic;

pub use dataset::{
    load_dataset, sample_batch, sample_episode, split_classes, split_for_ensemble, Batch, ClassSplit, Episode,
    EpisodeItem, Item, ItemPool, LabeledDataset, Payload, PayloadKind, Raster,
};
pub use decoders::{
    compute_prototypes, episodic_accuracy, mct_predict, mct_update, protonet_predict, AccuracySummary,
    ClassDistribution, DistanceMode, MctConfig, PrototypeSet,
};
pub use encoder::{EmbeddingProvider, Encoder, EncoderParams};
pub use ensemble::{EnsembleFeatures, EnsembleModel, EnsembleVariant};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use pipeline::{RunConfig, RunReport};
