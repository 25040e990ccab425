//! Elementwise arithmetic with channel/batch broadcasting, and activations.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Contiguous stretch of the output paired with where it reads from `b`.
#[derive(Clone, Copy, Debug)]
struct Run {
    out_start: usize,
    b_start: usize,
    /// 1 when `b` advances with the output, 0 when it is held constant.
    b_step: usize,
    len: usize,
}

/// Splits the iteration of `a_shape` into runs over which the broadcast
/// source `b_shape` is either contiguous or constant.
fn broadcast_runs(op: &'static str, a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<Run>> {
    let b_numel: usize = b_shape.iter().product();
    let a_numel: usize = a_shape.iter().product();
    if b_numel == 1 {
        return Ok(vec![Run {
            out_start: 0,
            b_start: 0,
            b_step: 0,
            len: a_numel,
        }]);
    }
    if a_shape == b_shape {
        return Ok(vec![Run {
            out_start: 0,
            b_start: 0,
            b_step: 1,
            len: a_numel,
        }]);
    }
    if a_shape.len() != b_shape.len()
        || a_shape
            .iter()
            .zip(b_shape)
            .any(|(&a, &b)| b != a && b != 1)
    {
        return Err(Error::dim(
            op,
            "broadcast",
            format!("cannot broadcast {:?} onto {:?}", b_shape, a_shape),
        ));
    }
    // Coalesce adjacent axes sharing the same broadcast status.
    let mut dims: Vec<(usize, bool)> = Vec::new();
    for (&a, &b) in a_shape.iter().zip(b_shape) {
        if a == 1 {
            continue;
        }
        let bcast = b == 1;
        match dims.last_mut() {
            Some((size, flag)) if *flag == bcast => *size *= a,
            _ => dims.push((a, bcast)),
        }
    }
    let (inner, inner_bcast) = dims.pop().unwrap_or((1, false));
    // Strides of the outer merged axes in the output and in `b`.
    let mut b_strides = vec![0usize; dims.len()];
    let mut acc = if inner_bcast { 1 } else { inner };
    for i in (0..dims.len()).rev() {
        if !dims[i].1 {
            b_strides[i] = acc;
            acc *= dims[i].0;
        }
    }
    let outer: usize = dims.iter().map(|d| d.0).product();
    let mut runs = Vec::with_capacity(outer);
    let mut idx = vec![0usize; dims.len()];
    for r in 0..outer {
        let b_start: usize = idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
        runs.push(Run {
            out_start: r * inner,
            b_start,
            b_step: if inner_bcast { 0 } else { 1 },
            len: inner,
        });
        for ax in (0..dims.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < dims[ax].0 {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(runs)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// `a ∘ b` with `b` equal in shape to `a`, one-element, or broadcastable
/// along axes where it has extent 1 (e.g. N×C×1×1 onto N×C×H×W).
pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let op = match kind {
        BinaryKind::Add => OpKind::Add,
        BinaryKind::Sub => OpKind::Sub,
        BinaryKind::Mul => OpKind::Mul,
    };
    let runs = broadcast_runs(op.name(), a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::ZERO; ad.len()];
    for r in &runs {
        let o = &mut out[r.out_start..r.out_start + r.len];
        let x = &ad[r.out_start..r.out_start + r.len];
        if r.b_step == 0 {
            let y = bd[r.b_start];
            match kind {
                BinaryKind::Add => o.iter_mut().zip(x).for_each(|(o, &x)| *o = x + y),
                BinaryKind::Sub => o.iter_mut().zip(x).for_each(|(o, &x)| *o = x - y),
                BinaryKind::Mul => o.iter_mut().zip(x).for_each(|(o, &x)| *o = x * y),
            }
        } else {
            let y = &bd[r.b_start..r.b_start + r.len];
            match kind {
                BinaryKind::Add => o.iter_mut().zip(x.iter().zip(y)).for_each(|(o, (&x, &y))| *o = x + y),
                BinaryKind::Sub => o.iter_mut().zip(x.iter().zip(y)).for_each(|(o, (&x, &y))| *o = x - y),
                BinaryKind::Mul => o.iter_mut().zip(x.iter().zip(y)).for_each(|(o, (&x, &y))| *o = x * y),
            }
        }
    }
    let b_len = b.numel();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        op,
        vec![a.clone(), b.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let ga = a.requires_grad().then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => {
                    let bd = b.data();
                    let mut ga = vec![T::ZERO; g.len()];
                    for r in &runs {
                        let s = r.out_start..r.out_start + r.len;
                        if r.b_step == 0 {
                            let y = bd[r.b_start];
                            ga[s.clone()].iter_mut().zip(&g[s]).for_each(|(o, &g)| *o = g * y);
                        } else {
                            let y = &bd[r.b_start..r.b_start + r.len];
                            ga[s.clone()]
                                .iter_mut()
                                .zip(g[s].iter().zip(y))
                                .for_each(|(o, (&g, &y))| *o = g * y);
                        }
                    }
                    ga
                }
            });
            let gb = b.requires_grad().then(|| {
                let ad = a.data();
                let mut gb = vec![T::ZERO; b_len];
                for r in &runs {
                    let s = r.out_start..r.out_start + r.len;
                    let gs = &g[s.clone()];
                    match (kind, r.b_step) {
                        (BinaryKind::Mul, 0) => {
                            let acc: T = gs.iter().zip(&ad[s]).map(|(&g, &x)| g * x).sum();
                            gb[r.b_start] += acc;
                        }
                        (BinaryKind::Mul, _) => {
                            gb[r.b_start..r.b_start + r.len]
                                .iter_mut()
                                .zip(gs.iter().zip(&ad[s]))
                                .for_each(|(o, (&g, &x))| *o += g * x);
                        }
                        (_, 0) => {
                            let acc: T = gs.iter().copied().sum();
                            if kind == BinaryKind::Sub {
                                gb[r.b_start] -= acc;
                            } else {
                                gb[r.b_start] += acc;
                            }
                        }
                        (_, _) => {
                            let dst = &mut gb[r.b_start..r.b_start + r.len];
                            if kind == BinaryKind::Sub {
                                dst.iter_mut().zip(gs).for_each(|(o, &g)| *o -= g);
                            } else {
                                dst.iter_mut().zip(gs).for_each(|(o, &g)| *o += g);
                            }
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, BinaryKind::Add)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, BinaryKind::Sub)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, BinaryKind::Mul)
}

/// Sums tensors of identical shape.
pub fn sum_all<T: Scalar>(terms: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Usage("sum of zero tensors".into()))?;
    rest.iter().try_fold(first.clone(), |acc, t| add(&acc, t))
}

/// Multiplication by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        OpKind::Scale,
        vec![x.clone()],
        Box::new(move |args| vec![Some(args.grad.iter().map(|&g| g * c).collect())]),
    )
}

/// Elementwise `x^p` for a constant exponent.
pub fn pow<T: Scalar>(x: &Tensor<T>, p: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v.powf(p)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        OpKind::Pow,
        vec![x.clone()],
        Box::new(move |args| {
            let x = args.inputs[0].data();
            let pm1 = p - T::ONE;
            vec![Some(
                args.grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * p * x.powf(pm1))
                    .collect(),
            )]
        }),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let y = if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    // keep the open-interval contract where the float type would round to 0 or 1
    y.max(T::MIN_POSITIVE).min(T::BELOW_ONE)
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Elementwise activation. GELU uses the exact Gaussian-CDF form.
pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let (out, op): (Vec<T>, _) = match kind {
        Activation::Relu => (x.data().iter().map(|&v| v.max(T::ZERO)).collect(), OpKind::Relu),
        Activation::Gelu => (x.data().iter().map(|&v| gelu_scalar(v)).collect(), OpKind::Gelu),
        Activation::Sigmoid => (x.data().iter().map(|&v| sigmoid_scalar(v)).collect(), OpKind::Sigmoid),
    };
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        op,
        vec![x.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let gx = match kind {
                Activation::Relu => g
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
                    .collect(),
                Activation::Gelu => g
                    .iter()
                    .zip(args.inputs[0].data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect(),
                Activation::Sigmoid => g
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &y)| g * y * (T::ONE - y))
                    .collect(),
            };
            vec![Some(gx)]
        }),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Relu)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Gelu)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Sigmoid)
}
