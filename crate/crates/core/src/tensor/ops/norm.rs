//! Layer and batch normalization.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};
use crate::Mode;

/// Default variance floor.
pub const NORM_EPS: f64 = 1e-5;

/// Running per-channel statistics for batch normalization in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            momentum: T::from_f64(0.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per sample over C×H×W.
    Layer,
    /// Per channel over N×H×W.
    Batch,
}

fn check_affine<T: Scalar>(op: &'static str, c: usize, p: Option<&Tensor<T>>, which: &'static str) -> Result<()> {
    match p {
        Some(t) if t.shape() != [c] => Err(Error::dim(op, which, format!("expected [{}], got {:?}", c, t.shape()))),
        _ => Ok(()),
    }
}

fn affine_inputs<T: Scalar>(x: &Tensor<T>, weight: Option<&Tensor<T>>, bias: Option<&Tensor<T>>) -> Vec<Tensor<T>> {
    let mut v = vec![x.clone()];
    v.extend(weight.cloned());
    v.extend(bias.cloned());
    v
}

/// Gradients for the affine parameters from `g` and the normalized values.
fn affine_grads<T: Scalar>(g: &[T], xhat: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::ZERO; c];
    let mut gb = vec![T::ZERO; c];
    for i in 0..n {
        for ch in 0..c {
            let s = (i * c + ch) * plane;
            let (gs, xs) = (&g[s..s + plane], &xhat[s..s + plane]);
            gw[ch] += gs.iter().zip(xs).map(|(&g, &x)| g * x).sum::<T>();
            gb[ch] += gs.iter().copied().sum::<T>();
        }
    }
    (gw, gb)
}

/// Assembles the gradient vector matching `affine_inputs`.
fn pack_grads<T: Scalar>(
    args_inputs: &[Tensor<T>],
    has_weight: bool,
    gx: Option<Vec<T>>,
    gw: Vec<T>,
    gb: Vec<T>,
) -> Vec<Option<Vec<T>>> {
    let mut out = vec![gx];
    let mut idx = 1;
    if has_weight {
        out.push(args_inputs[idx].requires_grad().then_some(gw));
        idx += 1;
    }
    if idx < args_inputs.len() {
        out.push(args_inputs[idx].requires_grad().then_some(gb));
    }
    out
}

/// Normalizes each sample over C×H×W, then applies per-channel affine
/// parameters.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("layer_norm")?;
    check_affine("layer_norm", c, weight, "weight")?;
    check_affine("layer_norm", c, bias, "bias")?;
    let plane = h * w;
    let group = c * plane;
    let xd = x.data();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut inv_std = Vec::with_capacity(n);
    for (src, dst) in xd.chunks(group).zip(xhat.chunks_mut(group)) {
        let m = T::from_usize(group);
        let mean = src.iter().copied().sum::<T>() / m;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let inv = T::ONE / (var + eps).sqrt();
        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = (v - mean) * inv);
        inv_std.push(inv);
    }
    let out = apply_affine(&xhat, n, c, plane, weight, bias);
    let has_weight = weight.is_some();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        OpKind::LayerNorm,
        affine_inputs(x, weight, bias),
        Box::new(move |args| {
            let g = args.grad;
            let wv = has_weight.then(|| args.inputs[1].data());
            let gx = args.inputs[0].requires_grad().then(|| {
                let mut gx = vec![T::ZERO; g.len()];
                let m = T::from_usize(group);
                let mut gxhat = vec![T::ZERO; group];
                for i in 0..n {
                    let s = i * group;
                    for ch in 0..c {
                        let wc = wv.map_or(T::ONE, |w| w[ch]);
                        let r = ch * plane..(ch + 1) * plane;
                        gxhat[r.clone()]
                            .iter_mut()
                            .zip(&g[s + r.start..s + r.end])
                            .for_each(|(o, &g)| *o = g * wc);
                    }
                    let xs = &xhat[s..s + group];
                    let mean_g = gxhat.iter().copied().sum::<T>() / m;
                    let mean_gx = gxhat.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / m;
                    let inv = inv_std[i];
                    gx[s..s + group]
                        .iter_mut()
                        .zip(gxhat.iter().zip(xs))
                        .for_each(|(o, (&gh, &xh))| *o = inv * (gh - mean_g - xh * mean_gx));
                }
                gx
            });
            let (gw, gb) = affine_grads(g, &xhat, n, c, plane);
            pack_grads(args.inputs, has_weight, gx, gw, gb)
        }),
    ))
}

fn apply_affine<T: Scalar>(
    xhat: &[T],
    n: usize,
    c: usize,
    plane: usize,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Vec<T> {
    let mut out = xhat.to_vec();
    if weight.is_none() && bias.is_none() {
        return out;
    }
    for i in 0..n {
        for ch in 0..c {
            let wc = weight.map_or(T::ONE, |w| w.data()[ch]);
            let bc = bias.map_or(T::ZERO, |b| b.data()[ch]);
            let s = (i * c + ch) * plane;
            out[s..s + plane].iter_mut().for_each(|v| *v = *v * wc + bc);
        }
    }
    out
}

/// Batch normalization over N×H×W per channel. Train mode normalizes with
/// batch statistics and, when `running` is given, updates it; eval mode
/// normalizes with `running`, which is then required.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
    eps: T,
    mode: Mode,
    running: Option<&mut RunningStats<T>>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    check_affine("batch_norm", c, weight, "weight")?;
    check_affine("batch_norm", c, bias, "bias")?;
    if let Some(r) = running.as_deref() {
        if r.mean.len() != c || r.var.len() != c {
            return Err(Error::dim(
                "batch_norm",
                "running stats",
                format!("expected {} channels, got {}", c, r.mean.len()),
            ));
        }
    }
    let plane = h * w;
    let xd = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    match mode {
        Mode::Train => {
            let m = n * plane;
            let mt = T::from_usize(m);
            for ch in 0..c {
                let mut s = T::ZERO;
                for i in 0..n {
                    let o = (i * c + ch) * plane;
                    s += xd[o..o + plane].iter().copied().sum::<T>();
                }
                let mu = s / mt;
                let mut v = T::ZERO;
                for i in 0..n {
                    let o = (i * c + ch) * plane;
                    v += xd[o..o + plane].iter().map(|&x| (x - mu) * (x - mu)).sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = v / mt;
            }
            if let Some(r) = running {
                let mom = r.momentum;
                let unbias = if m > 1 { mt / T::from_usize(m - 1) } else { T::ONE };
                for ch in 0..c {
                    r.mean[ch] = (T::ONE - mom) * r.mean[ch] + mom * mean[ch];
                    r.var[ch] = (T::ONE - mom) * r.var[ch] + mom * var[ch] * unbias;
                }
            }
        }
        Mode::Eval => {
            let r = running.ok_or_else(|| {
                Error::State("eval-mode batch norm requires populated running statistics".into())
            })?;
            mean.copy_from_slice(&r.mean);
            var.copy_from_slice(&r.var);
        }
    }
    let inv: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; xd.len()];
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * plane;
            let (mu, iv) = (mean[ch], inv[ch]);
            xhat[o..o + plane]
                .iter_mut()
                .zip(&xd[o..o + plane])
                .for_each(|(d, &v)| *d = (v - mu) * iv);
        }
    }
    let out = apply_affine(&xhat, n, c, plane, weight, bias);
    let has_weight = weight.is_some();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        OpKind::BatchNorm,
        affine_inputs(x, weight, bias),
        Box::new(move |args| {
            let g = args.grad;
            let wv = has_weight.then(|| args.inputs[1].data());
            let gx = args.inputs[0].requires_grad().then(|| {
                let mut gx = vec![T::ZERO; g.len()];
                let mt = T::from_usize(n * plane);
                for ch in 0..c {
                    let wc = wv.map_or(T::ONE, |w| w[ch]);
                    let iv = inv[ch];
                    if mode == Mode::Eval {
                        for i in 0..n {
                            let o = (i * c + ch) * plane;
                            gx[o..o + plane]
                                .iter_mut()
                                .zip(&g[o..o + plane])
                                .for_each(|(d, &g)| *d = g * wc * iv);
                        }
                        continue;
                    }
                    let (mut sg, mut sgx) = (T::ZERO, T::ZERO);
                    for i in 0..n {
                        let o = (i * c + ch) * plane;
                        for (&g, &xh) in g[o..o + plane].iter().zip(&xhat[o..o + plane]) {
                            sg += g * wc;
                            sgx += g * wc * xh;
                        }
                    }
                    let (mg, mgx) = (sg / mt, sgx / mt);
                    for i in 0..n {
                        let o = (i * c + ch) * plane;
                        for ((d, &g), &xh) in gx[o..o + plane].iter_mut().zip(&g[o..o + plane]).zip(&xhat[o..o + plane]) {
                            *d = iv * (g * wc - mg - xh * mgx);
                        }
                    }
                }
                gx
            });
            let (gw, gb) = affine_grads(g, &xhat, n, c, plane);
            pack_grads(args.inputs, has_weight, gx, gw, gb)
        }),
    ))
}

/// Dispatches to [`layer_norm`] or [`batch_norm`].
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    kind: NormKind,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
    eps: T,
    mode: Mode,
    running: Option<&mut RunningStats<T>>,
) -> Result<Tensor<T>> {
    match kind {
        NormKind::Layer => layer_norm(x, weight, bias, eps),
        NormKind::Batch => batch_norm(x, weight, bias, eps, mode, running),
    }
}
