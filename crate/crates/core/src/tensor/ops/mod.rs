//! Differentiable primitives.

pub(crate) mod par;

mod conv;
mod dropout;
mod elementwise;
mod layout;
mod loss;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod resize;
mod softmax;

pub use conv::{conv2d, dws_conv3x3, Conv2dSpec};
pub use dropout::dropout;
pub use elementwise::{
    activation, add, elementwise, gelu, mul, pow, relu, scale, sigmoid, sub, sum_all, Activation, BinaryKind,
};
pub use layout::{channel_shuffle, concat, permute, reshape, shuffle_index};
pub use loss::{bce, soft_dice, DICE_SMOOTH};
pub use matmul::matmul;
pub use norm::{batch_norm, layer_norm, normalize, NormKind, RunningStats, NORM_EPS};
pub use pool::{global_avg_pool, global_max_pool, max_pool2x2, pool, PoolKind};
pub use reduce::{mean, sum};
pub use resize::{bilinear_resize, upsample2x};
pub use softmax::softmax;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `Σ y ⊗ r`: projects `y` onto a fixed direction, giving a generic scalar loss.
pub fn weighted_sum<T: Scalar>(y: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(sum(&mul(y, r)?))
}
