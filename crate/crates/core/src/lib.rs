//! Thin-structure semantic segmentation built from first principles.
//!
//! The crate bundles a small reverse-mode tensor engine ([`graph`]), the
//! luminance-augmented input pipeline ([`preprocess`]), an attention-gated
//! U-Net with an iterative feedback loop ([`model`]), the class-balanced
//! training objective ([`losses`]), evaluation metrics ([`metrics`]) and a
//! seeded synthetic scene generator ([`synth`]).
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checker re-runs the same code at `f64`.

pub mod archive;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use losses::{ClassWeights, LossBundle};
pub use mask::LabelMask;
pub use metrics::MetricsReport;
pub use model::{IterationOutputs, Misra, ModelConfig};
pub use params::{Binding, ParamStore};
pub use preprocess::{FiveChannelInput, RgbImage};
pub use scalar::Scalar;
pub use synth::{LabeledScene, SceneSpec};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type FiveChannelInput32 = FiveChannelInput<f32>;
pub type Misra32 = Misra<f32>;
pub type Misra64 = Misra<f64>;
