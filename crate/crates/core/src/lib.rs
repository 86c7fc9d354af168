//! Normalized convolutional networks with stochastic scales: batch, weight
//! and analytic normalization, a sampling model of batch-normalization noise,
//! variational learning of the post-normalization scales and the optimizers
//! used to train them, on top of a small reverse-mode autodiff tape.

pub mod error;
pub mod network;
pub mod noise;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod variational;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::{Error, Result, TensorError};
pub use network::{Architecture, Block, Bound, ConvSpec, ForwardOptions, Network, NoiseMode, Trace};
pub use norm::{DatasetMoments, Mode, NormKind, NormStats};
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
