//! Weakly supervised person-activity networks and their transfer to
//! multiple-choice question answering.
//!
//! Networks combine a person-box ROI feature with a full-image ROI
//! feature, score every person in an image, and take the per-class max
//! over people as the image score so that image-level labels can train
//! person-level classifiers.

pub mod cca;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod qa;
pub mod tensor;
pub mod train;

pub use data::{Corpus, Sample, Supervision, SynthSpec};
pub use error::{Error, Result};
pub use layers::Roi;
pub use loss::{InstanceScores, LossWeights};
pub use model::{ModelConfig, Network, Variant};
pub use tensor::Tensor;
pub use train::{train, LossMode, TrainConfig, TrainSupervision};
