//! Fused segmentation loss terms over probability maps.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Smoothing constant of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_pair<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            op,
            "shape",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `pred` against `target`.
/// Probabilities are clamped into the open unit interval before the logs.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("bce", pred, target)?;
    let lo = T::MIN_POSITIVE;
    let hi = T::BELOW_ONE;
    let inv_n = T::ONE / T::from_usize(pred.numel());
    let mut total = T::ZERO;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let p = p.max(lo).min(hi);
        total += -(g * p.ln() + (T::ONE - g) * (T::ONE - p).ln());
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![total * inv_n],
        OpKind::Bce,
        vec![pred.clone(), target.clone()],
        Box::new(move |args| {
            let (p, t) = (&args.inputs[0], &args.inputs[1]);
            let up = args.grad[0] * inv_n;
            let gp = p.requires_grad().then(|| {
                p.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &g)| {
                        let p = p.max(lo).min(hi);
                        up * (p - g) / (p * (T::ONE - p))
                    })
                    .collect()
            });
            let gt = t.requires_grad().then(|| {
                p.data()
                    .iter()
                    .map(|&p| {
                        let p = p.max(lo).min(hi);
                        up * ((T::ONE - p).ln() - p.ln())
                    })
                    .collect()
            });
            vec![gp, gt]
        }),
    ))
}

/// Soft-Dice coefficient `(2Σpg + 1)/(Σp + Σg + 1)`, computed per sample
/// (leading axis) and averaged over the batch.
pub fn soft_dice<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("soft_dice", pred, target)?;
    let n = pred.dim(0);
    let per = pred.numel() / n;
    let eps = T::from_f64(DICE_SMOOTH);
    let mut nums = Vec::with_capacity(n);
    let mut dens = Vec::with_capacity(n);
    for (p, g) in pred.data().chunks(per).zip(target.data().chunks(per)) {
        let (mut pg, mut sp, mut sg) = (T::ZERO, T::ZERO, T::ZERO);
        for (&a, &b) in p.iter().zip(g) {
            pg += a * b;
            sp += a;
            sg += b;
        }
        nums.push(T::from_f64(2.0) * pg + eps);
        dens.push(sp + sg + eps);
    }
    let inv_n = T::ONE / T::from_usize(n);
    let value = nums.iter().zip(&dens).map(|(&a, &b)| a / b).sum::<T>() * inv_n;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        OpKind::SoftDice,
        vec![pred.clone(), target.clone()],
        Box::new(move |args| {
            let (p, t) = (&args.inputs[0], &args.inputs[1]);
            let up = args.grad[0] * inv_n;
            let two = T::from_f64(2.0);
            // ∂(N/D)/∂a = (2b·D − N)/D² for a ∈ pred, symmetric for the target.
            let side = |other: &[T]| -> Vec<T> {
                let mut g = Vec::with_capacity(other.len());
                for (s, chunk) in other.chunks(per).enumerate() {
                    let (num, den) = (nums[s], dens[s]);
                    let k = up / (den * den);
                    g.extend(chunk.iter().map(|&b| k * (two * b * den - num)));
                }
                g
            };
            vec![
                p.requires_grad().then(|| side(t.data())),
                t.requires_grad().then(|| side(p.data())),
            ]
        }),
    ))
}
