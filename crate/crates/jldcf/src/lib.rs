//! Siamese RGB-D salient object detection via joint learning and densely
//! cooperative fusion, on a minimal reverse-mode autodiff core, together
//! with the standard five saliency evaluation measures and a training /
//! evaluation harness.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dcf;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod jl;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, ConfigError, DataError, MetricError, OpError, TrainError};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
