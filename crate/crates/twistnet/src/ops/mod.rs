//! Neural primitives: convolutions, pooling, normalizations, pairwise
//! products, elementwise ops, and the smoothed cross-entropy loss.
//!
//! Every op is a pure function of its tensor inputs; when any input requires
//! gradients, the op records a node on the [`Tape`](crate::tensor::tape::Tape).

pub mod conv;
pub mod elementwise;
pub mod gemm;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pair;
pub mod pool;

pub use conv::{conv2d, conv_out_extent, depthwise_conv3x3, Conv2d};
pub use elementwise::{add, concat_channels, mul, relu, scale, sigmoid, sub, sum};
pub use linear::{linear, matmul, Linear};
pub use loss::cross_entropy_smoothed;
pub use norm::{batchnorm2d, groupnorm, l2_normalize_channels, BatchNorm2d, GroupNorm};
pub use pair::{pair_product, upper_tri_indices};
pub use pool::{global_avg_pool, maxpool3x3s2};
