//! Entity-level video representations on top of frozen backbone features.
//!
//! Spatial tokens of each frame are pooled into a few entity vectors by
//! learnable cross-attention queries ([`pooling`]), fused over time by a
//! transformer over all entity tokens ([`fusion`]), trained with a
//! sequence contrastive loss ([`training`]) and scored by frozen-embedding
//! probes ([`eval`]).

pub mod checkpoint;
mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod loss;
pub mod model;
pub mod mvff;
mod nn;
pub mod pooling;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use features::{
    generate_synthetic_dataset, PhaseAnnotations, SyntheticDataset, SyntheticSpec, TokenGrid,
    VideoFeatures, VideoTruth,
};
pub use fusion::PoolingMode;
pub use model::{FrontendKind, Model, ModelConfig};
pub use nn::{LayerNorm, Linear};
