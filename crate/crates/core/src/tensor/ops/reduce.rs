use alloc::boxed::Box;
use alloc::vec;

use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Sum of all elements, as a one-element tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(
        vec![1],
        vec![s],
        OpKind::Sum,
        vec![x.clone()],
        Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
    )
}

/// Mean of all elements, as a one-element tensor.
pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::ONE / T::from_usize(n);
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op(
        vec![1],
        vec![s * inv],
        OpKind::Mean,
        vec![x.clone()],
        Box::new(move |args| vec![Some(vec![args.grad[0] * inv; n])]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::mul;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f64>::param(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let v = vec![1.0, -2.0, 0.5, 4.0];
        let x = Tensor::<f64>::param(&[4], v.clone()).unwrap();
        sum(&mul(&x, &x).unwrap()).backward().unwrap();
        let expect: alloc::vec::Vec<f64> = v.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), expect);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_on_leaf_or_vector_is_usage_error() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(x.backward(), Err(crate::Error::Usage(_))));
        let y = crate::tensor::ops::scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn mean_value() {
        let x = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean(&x).item().unwrap(), 2.5);
    }
}
