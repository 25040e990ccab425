use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};
use crate::Mode;

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1−p)`; evaluation mode
/// and `p = 0` return the input unchanged.
pub fn dropout<T: Scalar, R: RngCore + ?Sized>(x: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("dropout", format!("probability must lie in [0, 1), got {}", p)));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    // an element is dropped when a uniform 32-bit draw falls below p·2³²
    let cut = (p * 4_294_967_296.0) as u64;
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if u64::from(rng.next_u32()) < cut { T::ZERO } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        OpKind::Dropout,
        vec![x.clone()],
        Box::new(move |args| vec![Some(args.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_and_zero_probability_are_identity() {
        let x = randn::<f64>(&[2, 3, 4, 4], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap().data(), x.data());
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn train_mode_zeroes_or_doubles_and_is_seeded() {
        let x = randn::<f64>(&[1, 4, 8, 8], 2);
        let y = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let z = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(y.data(), z.data());
        let mut dropped = 0;
        for (&a, &b) in x.data().iter().zip(y.data()) {
            assert!(b == 0.0 || b == 2.0 * a);
            dropped += (b == 0.0) as usize;
        }
        assert!(dropped > 64 && dropped < 192, "{dropped}");
    }

    #[test]
    fn gradient_follows_realized_mask() {
        let x = randn::<f64>(&[1, 1, 4, 4], 3).to_param();
        let y = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        crate::tensor::ops::sum(&y).backward().unwrap();
        for ((&g, &yv), &xv) in x.grad().unwrap().iter().zip(y.data()).zip(x.data()) {
            assert_eq!(g, if yv == 0.0 && xv != 0.0 { 0.0 } else { 2.0 });
        }
    }

    #[test]
    fn probability_one_is_rejected() {
        let x = randn::<f64>(&[1, 1, 2, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::Config { .. })));
    }
}
