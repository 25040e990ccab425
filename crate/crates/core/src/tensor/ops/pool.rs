use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// 2×2 window, stride 2. Odd extents are padded on the right/bottom with
    /// the lowest representable value, so the output is ⌈H/2⌉×⌈W/2⌉.
    Max2x2,
    GlobalAvg,
    GlobalMax,
}

/// Pooling over N×C×H×W. Max variants route the gradient to the first
/// (row-major) maximal element of each window.
pub fn pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("pool")?;
    let xd = x.data();
    let plane = h * w;
    match kind {
        PoolKind::GlobalAvg => {
            let inv = T::ONE / T::from_usize(plane);
            let out: Vec<T> = xd.chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            Ok(Tensor::from_op(
                vec![n, c, 1, 1],
                out,
                OpKind::GlobalAvgPool,
                vec![x.clone()],
                Box::new(move |args| {
                    let mut gx = Vec::with_capacity(args.grad.len() * plane);
                    for &g in args.grad {
                        gx.extend(core::iter::repeat_n(g * inv, plane));
                    }
                    vec![Some(gx)]
                }),
            ))
        }
        PoolKind::GlobalMax => {
            let mut out = Vec::with_capacity(n * c);
            let mut arg = Vec::with_capacity(n * c);
            for (pi, p) in xd.chunks(plane).enumerate() {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                out.push(p[best]);
                arg.push(pi * plane + best);
            }
            let len = xd.len();
            Ok(Tensor::from_op(
                vec![n, c, 1, 1],
                out,
                OpKind::GlobalMaxPool,
                vec![x.clone()],
                Box::new(move |args| {
                    let mut gx = vec![T::ZERO; len];
                    for (&g, &i) in args.grad.iter().zip(&arg) {
                        gx[i] += g;
                    }
                    vec![Some(gx)]
                }),
            ))
        }
        PoolKind::Max2x2 => {
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = Vec::with_capacity(n * c * ho * wo);
            let mut arg: Vec<u32> = Vec::with_capacity(n * c * ho * wo);
            for (pi, p) in xd.chunks(plane).enumerate() {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best_v = T::LOWEST;
                        let mut best_i = usize::MAX;
                        for dy in 0..2 {
                            let iy = 2 * oy + dy;
                            if iy >= h {
                                continue;
                            }
                            for dx in 0..2 {
                                let ix = 2 * ox + dx;
                                if ix >= w {
                                    continue;
                                }
                                let v = p[iy * w + ix];
                                if best_i == usize::MAX || v > best_v {
                                    best_v = v;
                                    best_i = iy * w + ix;
                                }
                            }
                        }
                        out.push(best_v);
                        arg.push((pi * plane + best_i) as u32);
                    }
                }
            }
            let len = xd.len();
            Ok(Tensor::from_op(
                vec![n, c, ho, wo],
                out,
                OpKind::MaxPool2x2,
                vec![x.clone()],
                Box::new(move |args| {
                    let mut gx = vec![T::ZERO; len];
                    for (&g, &i) in args.grad.iter().zip(&arg) {
                        gx[i as usize] += g;
                    }
                    vec![Some(gx)]
                }),
            ))
        }
    }
}

pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pool(x, PoolKind::Max2x2)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pool(x, PoolKind::GlobalAvg)
}

pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pool(x, PoolKind::GlobalMax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{sum, weighted_sum};

    fn grid() -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn global_reference_values() {
        assert_eq!(global_avg_pool(&grid()).unwrap().data(), &[2.5]);
        assert_eq!(global_max_pool(&grid()).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 5], 5.0).unwrap();
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 5.0));
        assert_eq!(global_avg_pool(&c).unwrap().shape(), &[2, 3, 1, 1]);
    }

    #[test]
    fn max2x2_halves_and_pads_odd_extents() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1.0, 9.0, 2.0, 3.0, 4.0, -5.0, 7.0, 0.0, -8.0]).unwrap();
        let y = max_pool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[9.0, 2.0, 7.0, -8.0]);
        assert_eq!(max_pool2x2(&Tensor::<f64>::zeros(&[2, 3, 8, 6]).unwrap()).unwrap().shape(), &[2, 3, 4, 3]);
    }

    #[test]
    fn max_tie_routes_gradient_to_first_element() {
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        sum(&max_pool2x2(&x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        x.zero_grad();
        sum(&global_max_pool(&x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_gradient_is_uniform_split() {
        let x = grid().to_param();
        let r = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
        weighted_sum(&global_avg_pool(&x).unwrap(), &r).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5; 4]);
    }
}
