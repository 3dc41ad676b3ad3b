//! Engine for medical-volume data pipelines.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod intensity;
pub mod interp;
pub mod metrics;
pub mod mvol;
pub mod nifti;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod transforms;
pub mod viz;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Affine, AxisCode};
pub use rng::Rng;
pub use volume::{Meta, MetaValue, MetaVolume, Tensor, TraceRecord};
pub use inference::{Predictor, StubPredictor};
pub use pipeline::{DataDict, Item, Pipeline};
pub use transforms::{StepConfig, Transform};
