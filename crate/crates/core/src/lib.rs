//! Unsupervised single-image segmentation.
//!
//! A small convolutional network is trained from scratch on each image
//! against its own argmax labels. The loss balances feature similarity
//! (cross-entropy) and spatial continuity (L1 of neighbour differences), and
//! the balance weight follows the current number of clusters. The crate also
//! ships the evaluation metrics and the file formats used by the `dynaseg`
//! command-line tool.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{count_clusters, LabelMap};
pub use loss::{LossBreakdown, ScheduleKind, WeightSchedule};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use trainer::{train_image, SegmentationResult, StopReason, TrainConfig};
