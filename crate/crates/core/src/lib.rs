//! Core of a compact encoder-decoder segmentation network with focal
//! modulation attention skips, bidirectional feature fusion and a dual
//! self-attention bottleneck: tensor engine, blocks, model, training loop and
//! metrics. Builds without `std` (an allocator is required).
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{BufferId, Buffers, ParamId, ParamStore, Scope};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Forward-pass behavior of dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::{Scalar, Tensor};

    pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        Tensor::randn(shape, seed).unwrap()
    }
}
