//! Low-rank pairwise alignment bilinear network for few-shot fine-grained
//! classification.
//!
//! A Conv4 encoder embeds images into `c x hw` feature maps. An alignment
//! layer rearranges support positions with a learned `hw x hw` transform,
//! a pairwise bilinear pooling layer turns each (query, class) pair into a
//! comparative feature, and a small relation network scores it. Training is
//! episodic with two parameter updates per iteration when an alignment loss
//! is active.

pub mod alignment;
pub mod checkpoint;
pub mod comparator;
pub mod config;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod model;
pub mod params;
pub mod pooling;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;

pub use comparator::RelationMatrix;
pub use alignment::AlignmentTransform;
pub use encoder::{AlignMode, EncoderConfig, FeatureMap};
pub use episodes::{Episode, EpisodeSpec, LabeledDataset};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::ModelParams;
pub use pooling::{ComparativeFeature, Normalization, PoolingConfig, PoolingVariant, ProjectionBank};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use train::{EvalReport, TrainConfig};
