//! Configurable Deformable DETR for sparse small-object detection.
//!
//! The crate bundles a reverse-mode tensor engine, the attention variants the
//! detector is built from, the detector itself (every architectural switch
//! lives in [`ModelConfig`]), the bipartite set-prediction loss, the
//! lesion-detection metric suite, and a synthetic dataset generator.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the rest of the workspace.

pub mod attention;
pub mod boxes;
pub mod data;
pub mod hungarian;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use boxes::{Annotation, BoundingBox};
pub use data::{AnnotatedImage, DatasetSpec};
pub use hungarian::{hungarian_assign, Assignment};
pub use loss::{LabelSet, LossWeights};
pub use metrics::{EvalSet, MetricReport, MetricValues};
pub use model::{ModelConfig, QueryInit};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type DeformableDetr64 = model::DeformableDetr<f64>;
pub type DeformableDetr32 = model::DeformableDetr<f32>;
