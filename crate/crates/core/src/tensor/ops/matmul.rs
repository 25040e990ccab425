use alloc::boxed::Box;
use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::{blas, Scalar};
use crate::tensor::{OpKind, Tensor};

/// Matrix product of `M×K` and `K×N`, or batched `B×M×K` and `B×K×N`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, k2, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) => (1, m, k, k2, n),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb => (ba, m, k, k2, n),
        (sa, sb) => {
            return Err(Error::dim(
                "matmul",
                "rank",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ))
        }
    };
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            "inner",
            format!("inner extents differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::ZERO; batch * m * n];
    for i in 0..batch {
        blas::mm(
            &ad[i * m * k..(i + 1) * m * k],
            &bd[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
            false,
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_op(
        shape,
        out,
        OpKind::MatMul,
        vec![a.clone(), b.clone()],
        Box::new(move |args| {
            let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::ZERO; batch * m * k];
                let bd = b.data();
                for i in 0..batch {
                    blas::mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                        false,
                    );
                }
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::ZERO; batch * k * n];
                let ad = a.data();
                for i in 0..batch {
                    blas::mm_tn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::ops::{permute, weighted_sum};
    use crate::testutil::randn;

    #[test]
    fn hand_multiplication() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_and_transpose_identity() {
        let b = randn::<f64>(&[3, 4], 1);
        let i = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), b.data());
        let a = randn::<f64>(&[2, 3], 2);
        let ab_t = permute(&matmul(&a, &b).unwrap(), &[1, 0]).unwrap();
        let bt_at = matmul(&permute(&b, &[1, 0]).unwrap(), &permute(&a, &[1, 0]).unwrap()).unwrap();
        for (x, y) in ab_t.data().iter().zip(bt_at.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_mismatch_is_dimension_error() {
        let a = randn::<f64>(&[2, 3], 1);
        let b = randn::<f64>(&[2, 3], 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { axis: "inner", .. })));
    }

    #[test]
    fn batched_gradients_match_finite_differences() {
        let a = randn::<f64>(&[2, 3, 4], 3);
        let b = randn::<f64>(&[2, 4, 5], 4);
        let r = randn::<f64>(&[2, 3, 5], 5);
        let report = GradCheck::new()
            .input("a", &a)
            .input("b", &b)
            .run(|v| weighted_sum(&matmul(&v[0], &v[1])?, &r))
            .unwrap();
        assert!(report.max_rel_error() <= 1e-5, "{report:?}");
    }
}
