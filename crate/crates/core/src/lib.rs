//! Self-supervised pretraining of 3D convolutional networks with space-time
//! cubic puzzles.
//!
//! A puzzle sample cuts four crops out of a video clip along either the
//! spatial or the temporal axis of a fixed 2x2x4 grid, shuffles them with a
//! random permutation, and asks a four-tower siamese network to classify the
//! permutation (optionally doubled by an upside-down flip). The learned
//! backbone is then evaluated on action recognition by fine-tuning or linear
//! probing.
//!
//! The crate is self-contained: dense tensors, explicit forward/backward
//! kernels, residual 3D backbones, puzzle sampling, clip datasets, training
//! loops, checkpoints, and gradient-check machinery. Kernels are generic over
//! the scalar type so the same code can run in f32 for training and f64 for
//! finite-difference verification.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod perm;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production scalar type. Checkpoints store this type bit-exactly.
pub type F = f32;

/// Tensor in the production scalar type.
pub type TensorF = tensor::Tensor<F>;

/// Parameter set in the production scalar type.
pub type NetworkParamsF = params::NetworkParams<F>;
