//! Training and inference engine for polyphonic sound event detection.
//!
//! The network is a stack of depthwise separable convolution blocks feeding a
//! time-dilated convolution head. The head comes in two variants: a plain
//! (batched) dilated convolution with a shared-weight classifier, and a
//! conditioned variant whose second input channel is filled, step by step,
//! with learned affine embeddings of the classifier's own previous
//! predictions: prediction feedback in the style of language modelling,
//! transplanted onto convolutions.
//!
//! Everything runs on a minimal in-crate `f64` tensor with hand-derived
//! backward passes; training is deterministic given a seed.

pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
