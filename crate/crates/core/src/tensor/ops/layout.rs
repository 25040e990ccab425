//! Shape-only rearrangements: reshape, permute, concat, channel shuffle.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Same data under a new shape with equal element count.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.contains(&0) {
        return Err(Error::dim(
            "reshape",
            "numel",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.to_vec(),
        OpKind::Reshape,
        vec![x.clone()],
        Box::new(|args| vec![Some(args.grad.to_vec())]),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Rearranges `data` of `shape` so that output axis `i` is input axis `axes[i]`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank
        && axes.iter().all(|&a| a < rank && !core::mem::replace(&mut seen[a], true));
    if !valid {
        return Err(Error::dim(
            "permute",
            "axes",
            format!("{:?} is not a permutation of 0..{}", axes, rank),
        ));
    }
    let shape: Vec<usize> = axes.iter().map(|&a| x.dim(a)).collect();
    let data = permute_data(x.data(), x.shape(), axes);
    let mut inverse = vec![0; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let out_shape = shape.clone();
    Ok(Tensor::from_op(
        shape,
        data,
        OpKind::Permute,
        vec![x.clone()],
        Box::new(move |args| vec![Some(permute_data(args.grad, &out_shape, &inverse))]),
    ))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim("concat", "axis", format!("axis {} out of range for rank {}", axis, rank)));
    }
    for t in xs {
        let agree = t.rank() == rank
            && (0..rank).all(|a| a == axis || t.dim(a) == first.dim(a));
        if !agree {
            return Err(Error::dim(
                "concat",
                "shape",
                format!("{:?} and {:?} differ off the concat axis {}", first.shape(), t.shape(), axis),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let runs: Vec<usize> = xs.iter().map(|t| t.dim(axis) * inner).collect();
    let total_run: usize = runs.iter().sum();
    let mut data = Vec::with_capacity(outer * total_run);
    for o in 0..outer {
        for (t, &run) in xs.iter().zip(&runs) {
            data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.dim(axis)).sum();
    Ok(Tensor::from_op(
        shape,
        data,
        OpKind::Concat,
        xs.to_vec(),
        Box::new(move |args| {
            let mut grads: Vec<Vec<T>> = runs.iter().map(|&r| Vec::with_capacity(outer * r)).collect();
            for o in 0..outer {
                let mut off = o * total_run;
                for (g, &run) in grads.iter_mut().zip(&runs) {
                    g.extend_from_slice(&args.grad[off..off + run]);
                    off += run;
                }
            }
            args.inputs
                .iter()
                .zip(grads)
                .map(|(t, g)| t.requires_grad().then_some(g))
                .collect()
        }),
    ))
}

/// Destination of input channel `i` under a `groups`-way shuffle of `c` channels.
pub fn shuffle_index(i: usize, c: usize, groups: usize) -> usize {
    (i % groups) * (c / groups) + i / groups
}

/// Channel shuffle on N×C×H×W: input channel `i` moves to
/// `(i mod g)·(C/g) + ⌊i/g⌋`.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_shuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(
            "shuffle_groups",
            format!("{} channels are not divisible into {} groups", c, groups),
        ));
    }
    let plane = h * w;
    let dest: Vec<usize> = (0..c).map(|i| shuffle_index(i, c, groups)).collect();
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for s in 0..n {
        for (i, &d) in dest.iter().enumerate() {
            let src = (s * c + i) * plane;
            let dst = (s * c + d) * plane;
            out[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        OpKind::ChannelShuffle,
        vec![x.clone()],
        Box::new(move |args| {
            let mut gx = vec![T::ZERO; args.grad.len()];
            for s in 0..n {
                for (i, &d) in dest.iter().enumerate() {
                    let src = (s * c + i) * plane;
                    let dst = (s * c + d) * plane;
                    gx[src..src + plane].copy_from_slice(&args.grad[dst..dst + plane]);
                }
            }
            vec![Some(gx)]
        }),
    ))
}
