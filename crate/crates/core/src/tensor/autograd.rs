use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{BackwardArgs, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifies the operation that produced a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    Conv2d = 1,
    MaxPool2x2,
    GlobalAvgPool,
    GlobalMaxPool,
    Resize,
    LayerNorm,
    BatchNorm,
    Relu,
    Gelu,
    Sigmoid,
    Softmax,
    Add,
    Sub,
    Mul,
    Scale,
    Pow,
    MatMul,
    Reshape,
    Permute,
    Concat,
    ChannelShuffle,
    Dropout,
    Sum,
    Mean,
    Bce,
    SoftDice,
}

impl OpKind {
    const ALL: [OpKind; 26] = [
        OpKind::Conv2d,
        OpKind::MaxPool2x2,
        OpKind::GlobalAvgPool,
        OpKind::GlobalMaxPool,
        OpKind::Resize,
        OpKind::LayerNorm,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Pow,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::ChannelShuffle,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Bce,
        OpKind::SoftDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2x2 => "max_pool2x2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::Resize => "resize",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Pow => "pow",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::ChannelShuffle => "channel_shuffle",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Bce => "bce",
            OpKind::SoftDice => "soft_dice",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == v)
    }
}

#[cfg(feature = "std")]
std::thread_local! {
    static CORRUPTED: core::cell::Cell<u8> = const { core::cell::Cell::new(0) };
}

#[cfg(not(feature = "std"))]
static CORRUPTED: core::sync::atomic::AtomicU8 = core::sync::atomic::AtomicU8::new(0);

/// Fault injection for verification tooling: when set, gradients produced by
/// the backward rule of `op` are scaled by 1.01. Applies to backward passes
/// run on the calling thread (process-wide without `std`).
pub fn corrupt_backward(op: Option<OpKind>) {
    let v = op.map_or(0, |k| k as u8);
    #[cfg(feature = "std")]
    CORRUPTED.with(|c| c.set(v));
    #[cfg(not(feature = "std"))]
    CORRUPTED.store(v, core::sync::atomic::Ordering::SeqCst);
}

pub fn corrupted_backward() -> Option<OpKind> {
    #[cfg(feature = "std")]
    let v = CORRUPTED.with(|c| c.get());
    #[cfg(not(feature = "std"))]
    let v = CORRUPTED.load(core::sync::atomic::Ordering::Relaxed);
    OpKind::from_u8(v)
}

/// Reverse topological order (outputs first) of every gradient-tracking
/// tensor reachable from `root`.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: BTreeMap<usize, ()> = BTreeMap::new();
    // (tensor, next input index to visit)
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.ptr_id(), ());
    while let Some((t, idx)) = stack.pop() {
        let next = t
            .node()
            .and_then(|n| n.inputs.get(idx))
            .map(|child| child.clone());
        match next {
            Some(child) => {
                stack.push((t, idx + 1));
                if child.requires_grad() && !visited.contains_key(&child.ptr_id()) {
                    visited.insert(child.ptr_id(), ());
                    stack.push((child, 0));
                }
            }
            None => order.push(t),
        }
    }
    order.reverse();
    order
}

pub(super) fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward requires a one-element loss, got shape {:?}",
            loss.shape()
        )));
    }
    if loss.node().is_none() {
        return Err(Error::Usage(
            "backward called on a tensor with no producing operation".into(),
        ));
    }
    let order = topo_order(loss);
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, t) in order.iter().enumerate() {
        slot.insert(t.ptr_id(), i);
    }
    let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(order.len());
    grads.resize_with(order.len(), || None);
    grads[0] = Some(vec![T::ONE]);
    let corrupted = corrupted_backward();

    for (i, t) in order.iter().enumerate() {
        let Some(g) = grads[i].take() else { continue };
        let Some(node) = t.node() else {
            t.accumulate_grad(&g);
            continue;
        };
        let mut input_grads = (node.backward)(&BackwardArgs {
            grad: &g,
            out: t.data(),
            inputs: &node.inputs,
        });
        drop(g);
        if corrupted == Some(node.op) {
            let f = T::from_f64(1.01);
            for ig in input_grads.iter_mut().flatten() {
                ig.iter_mut().for_each(|v| *v *= f);
            }
        }
        for (input, ig) in node.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(ig.len(), input.numel(), "{:?} backward size", node.op);
            let j = slot[&input.ptr_id()];
            match &mut grads[j] {
                Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                empty => *empty = Some(ig),
            }
        }
    }
    Ok(())
}
