//! Differentiable primitives. Each op computes its forward value eagerly and
//! records a backward closure on the tape.

mod conv;
mod elementwise;
pub mod kernels;
mod linalg;
mod loss;
mod reduce;
mod sample;
mod shape;
mod softmax;

pub use conv::{conv2d, conv2d_padded, conv_output_extent, Padding};
pub use elementwise::{add, add_channel_bias, mul, relu, scale, scale_by_map, sigmoid, sub};
pub use linalg::{linear, matmul, transpose};
pub use loss::{bce_loss, cross_entropy, kl_div, BCE_EPS, KL_EPS};
pub use reduce::{argmax_axis, max_axis, mean, mean_axis, sum, sum_axis};
pub use sample::{bilinear_sample, upsample_bilinear, BilinearAxis};
pub use shape::{concat, gather, reshape};
pub use softmax::{masked_softmax_rows, softmax};

pub(crate) use sample::{lerp2, lerp2_coord_grad, lerp2_scatter};
