//! Neural network operators.
//!
//! Every operator is a pure function: forward passes return outputs plus
//! whatever cache the matching backward pass needs, and backward passes map
//! upstream gradients to input/parameter gradients. There is no tape; the
//! network module composes these explicitly.
//!
//! Determinism contract: every reduction accumulates in f64 in a fixed
//! order per output element, and parallelism only splits work across
//! disjoint output regions, so results are bit-identical for any thread
//! count.

pub mod activation;
pub mod batchnorm;
pub mod conv3d;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{batchnorm3d_backward, batchnorm3d_forward, BnCache, BnGrads, BnState};
pub use conv3d::{conv3d_backward, conv3d_forward, conv3d_output_shape, Conv3dGrads, ConvSpec};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{softmax, softmax_cross_entropy, top1_accuracy};
pub use pool::{
    global_avgpool_backward, global_avgpool_forward, maxpool3d_backward, maxpool3d_forward,
};

/// Whether batch statistics are computed (train) or running statistics are
/// consumed (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}
