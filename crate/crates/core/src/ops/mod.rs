//! Differentiable operations, implemented as methods on [`crate::Var`].

mod activation;
mod channel;
mod conv;
mod elementwise;
pub(crate) mod linalg;
mod reduce;

pub use activation::DEFAULT_LEAKY_SLOPE;
pub use conv::Conv2dGeometry;
