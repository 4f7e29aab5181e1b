//! Standard CNN layers with analytic backward passes.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod loss;
mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{BatchNormCache, BatchNormGrads, BatchNormLayer, BN_EPSILON, BN_MOMENTUM};
pub(crate) use conv::{filter_backward, filter_forward};
pub use conv::{ConvGrads, ConvLayer};
pub use dense::{DenseGrads, DenseLayer};
pub use dropout::{dropout, dropout_backward, DropoutLayer, DropoutMask};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{maxpool_backward, maxpool_forward, PoolIndices};

/// Whether a forward pass is part of training (batch statistics, dropout
/// masks) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
