pub mod buffer;
pub mod dialog;
pub mod estimators;
pub mod explore;
pub mod kb;
pub mod policy;
pub mod position;
pub mod reward;
pub mod synth;
pub mod train;

pub use buffer::{update_buffers, Buffer, BufferPair};
pub use dialog::{Dialog, DialogContext, EntitySet, Turn};
pub use estimators::{clip_buffer_probs, Diagnostics, EstimatorError, Example, GradientEstimate};
pub use explore::{systematic_explore, ExplorationEntry, ExplorationResult};
pub use kb::{Clause, KnowledgeBase, Query};
pub use policy::{Action, FeatureTemplate, PolicyContext, PolicyError, PolicyParameters};
pub use position::{PositionConfig, PositionModel};
pub use reward::{reward, RewardValue};
pub use synth::{generate, BenchConfig, Benchmark};
pub use train::{EstimatorKind, PositionMode, TrainConfig, TrainError};
