//! Weakly self-supervised embeddings for wearable-sensor activity data.
//!
//! Raw streams are cut into windows, summarized by per-channel statistics and
//! linked to temporal and feature-space neighbors. A residual autoencoder is
//! trained first on reconstruction plus neighbor consistency, then as a
//! siamese encoder on same/different-activity pairs. Embeddings are clustered
//! with k-means and scored by clustering accuracy.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod grad;
mod io;
pub mod losses;
pub mod model;
pub mod neighbors;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use checkpoint::{checkpoint_path, Checkpoint};
pub use cluster::{cluster_accuracy, export_embeddings, kmeans, ClusterAssignment, EvalReport, Points};
pub use config::TrainConfig;
pub use dataset::{
    load_stream, make_budget_split, make_weak_pairs, segment, ClassId, LabelBudgetSplit, Schema, Segment,
    SensorStream, WeakPair,
};
pub use error::{Error, Result};
pub use features::{extract_features, FeatureVector, NormStats};
pub use grad::{lr_schedule, Activation, Graph, LrSchedule, Tensor};
pub use losses::{stage1_loss, stage2_loss, LossWeights, Reduction};
pub use model::{Architecture, ModelParams};
pub use neighbors::{NeighborIndex, SegmentPosition};
pub use pipeline::{prepare, PrepareOptions, Prepared};
pub use synth::SynthConfig;
pub use training::{train_stage1, train_stage2, Stage, TrainReport, TrainState, Trainer};
