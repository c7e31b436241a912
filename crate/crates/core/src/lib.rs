pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod updates;
pub mod weights;

pub use augment::{AugmentPolicy, ChannelStats, Image, TransformParams, ViewBatch};
pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::{Mode, Protocol, RunConfig};
pub use data::{DatasetEntry, ImageSource, LabeledSource};
pub use eval::{Backbone, EvalReport, ProbeConfig};
pub use loss::{Embedding, LossValue};
pub use networks::{ArchitectureSpec, TripletNetwork, TripletState};
pub use trainer::{CollapseReport, StepRecord, TrainConfig};
pub use updates::{EmaSchedule, OptimizerHyper};
pub use weights::WeightSet;
