//! Learnable linear/non-linear feature masks for small neural networks.
//!
//! A mask module placed before a block's activation splits the block's
//! channels into a non-linear part, which continues through the activation,
//! and a linear part, which skips every remaining non-linearity and reaches
//! the classifier through an affine head. The binary masks are trained end to
//! end with a straight-through gradient. Learned masks then drive structural
//! pruning: linear channels of later blocks are cut out of the backbone while
//! the first block's linear channels keep a fast track to the classifier.
//!
//! Everything is generic over the [`Scalar`] element type; the aliases below
//! fix it to `f64`, the precision used for gradient checks and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod layers;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Var;
pub use mask::{MaskPair, SteConvention};
pub use model::{ModelConfig, ModelKind};
pub use params::ParamGroup;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = graph::Tape<f64>;
pub type Tape32 = graph::Tape<f32>;
pub type MaskParams64 = mask::MaskModuleParams<f64>;
pub type Network64 = model::MaskedNetwork<f64>;
pub type Network32 = model::MaskedNetwork<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
