use alloc::boxed::Box;
use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            "axis",
            format!("axis {} out of range for shape {:?}", axis, x.shape()),
        ));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = xd[base];
            for k in 1..len {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = T::ZERO;
            for k in 0..len {
                let e = (xd[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            let inv = T::ONE / s;
            for k in 0..len {
                out[base + k * inner] *= inv;
            }
        }
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        out,
        OpKind::Softmax,
        vec![x.clone()],
        Box::new(move |args| {
            let (g, y) = (args.grad, args.out);
            let mut gx = vec![T::ZERO; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::ZERO;
                    for k in 0..len {
                        dot += g[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..len {
                        let j = base + k * inner;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::ops::weighted_sum;
    use crate::testutil::randn;

    #[test]
    fn reference_values() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let x = Tensor::<f32>::from_f64(&[2], &[1000.0, 1000.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one_on_every_axis() {
        let x = randn::<f64>(&[2, 3, 4], 11);
        for axis in 0..3 {
            let y = softmax(&x, axis).unwrap();
            let s = y.shape().to_vec();
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let tot: f64 = (0..s[axis]).map(|k| y.data()[o * s[axis] * inner + k * inner + i]).sum();
                    assert!((tot - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = randn::<f64>(&[3, 5], 12);
        let r = randn::<f64>(&[3, 5], 13);
        for axis in 0..2 {
            let report = GradCheck::new()
                .input("x", &x)
                .run(|v| weighted_sum(&softmax(&v[0], axis)?, &r))
                .unwrap();
            assert!(report.max_rel_error() <= 1e-5, "{report:?}");
        }
    }
}
