//! Gated mixture-of-experts fusion for two-stream classifiers.
//!
//! Two small convolutional experts (an appearance stream and a motion stream)
//! produce pre-softmax class scores and mid-layer feature maps. A gating
//! network reads the fused feature maps of both experts and emits per-video,
//! non-negative fusion weights for the experts' scores, optionally trained
//! jointly with its own classification head. Fixed weighted averaging and
//! SCI-weighted fusion are provided as baselines.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experts;
pub mod features;
pub mod gating;
pub mod graph;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
