//! Multi-modal brain-tumour segmentation: a four-branch spatial-reduction
//! transformer encoder, adaptive feature fusion, task-specific decoders for
//! whole tumour / tumour core / enhancing tumour, and the training and
//! evaluation machinery around them.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod data;
pub mod domain;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use domain::{Modality, Region};
pub use error::{Error, Result};
pub use model::{ModelConfig, Network, Variant};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{ParamId, ParamStore, Parameter, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
