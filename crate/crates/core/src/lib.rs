//! Dual-branch fully-transformer visual tracker built on a small
//! reverse-mode autodiff tensor library.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`param`], [`checkpoint`]: dense `f64` tensors,
//!   tape-based gradients, named parameters and their on-disk format.
//! * [`attention`]: multi-head attention with local (shifted-window), global
//!   and cross variants.
//! * [`model`]: patch embedding, transformer blocks, patch merging and the
//!   two-branch feature extractor.
//! * [`heads`], [`boxes`], [`loss`]: prediction heads, label assignment and
//!   training losses.
//! * [`cost`]: closed-form parameter and FLOP accounting.
//! * [`tracking`], [`train`]: the inference loop, synthetic data, metrics and
//!   a small trainer.

pub mod attention;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod tracking;
pub mod train;

pub use boxes::BoundingBox;
pub use config::ModelConfig;
pub use cost::CostReport;
pub use error::{Error, Result};
pub use flops::{BlockKind, OpCounter};
pub use graph::{Activation, Gradients, Graph, NodeId};
pub use heads::{PredictionMaps, Predictions};
pub use loss::LossWeights;
pub use model::{Features, Twinformer};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
pub use tracking::{Sequence, TrackMode, TrackOptions, Tracker};
