//! SocialCircle trajectory forecasting.
//!
//! Neighbors of a target agent are summarised per angular partition around
//! it, embedded, and fused with the target's own trajectory embedding before
//! a small transformer encoder predicts the future. The crate also carries
//! the pieces needed to train and evaluate that model and to probe it with
//! synthetic neighbors.

pub mod checkpoint;
pub mod circle;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use circle::{AttentionProfile, Factor, FactorSet, MetaMatrix, PartitionConfig};
pub use data::{AgentTrack, Neighbor, NormalizationTransform, Point, PredictionCase, Unit};
pub use metrics::EvalReport;
pub use model::{ModelConfig, ParameterStore, PredictionOutput};
pub use probe::{ProbeRequest, ProbeResponse};
pub use tensor::{Graph, Tensor, Var};
pub use train::TrainConfig;
