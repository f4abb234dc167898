//! Differentiable deformable image registration.
//!
//! A convolutional trunk mixing linear and deformable layers estimates a
//! displacement field from a source/target pair, a Catmull-Rom resampler
//! followed by a learned filter brings it back to full resolution, and a
//! coarse-to-fine warping recursion accumulates residual fields over an image
//! pyramid. Training is unsupervised: an NCC-derived SSD data term at every
//! level plus a clamped penalty on the finest residual, optimized with Adam.
//!
//! All backward passes are written by hand and verified against central
//! finite differences (see [`gradcheck`]).

pub mod bench;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod layers;
mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossConfig};
pub use model::{ModelConfig, ModelParams, PyramidPair};
pub use sampling::{Dvf, KernelKind};
pub use tensor::{Shape, Tensor};
