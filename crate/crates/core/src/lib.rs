//! Unsupervised video object segmentation from per-frame spectral
//! initializations refined by a flow-consistency objective.
//!
//! The usual entry point is [`pipeline::run`] on a [`VideoBundle`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod bundle;
pub mod error;
pub mod flowops;
pub mod grid;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod segmentation;
pub mod synth;
pub mod tensor;

pub use affinity::{AffinityConfig, AffinityMatrix, InitMask, PicStatus};
pub use bundle::VideoBundle;
pub use error::{Error, Result};
pub use flowops::{ReliabilityMask, WarpOperator, WarpSet};
pub use grid::Grid;
pub use objective::{Deviation, ObjectiveConfig, OptimizerKind, SoftMask};
pub use pipeline::{PipelineConfig, Resolution, Segmentation};
pub use segmentation::{BinaryMask, MetricReport};
pub use synth::SceneSpec;
pub use tensor::Tensor;
