use fmbff_core::metrics::{confusion, metrics_from, Confusion};
use fmbff_core::tensor::ops::{self, Conv2dSpec};
use fmbff_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct summation over zero-padded windows, accumulated in f64. Also
/// returns the sum of absolute products per output, the scale that bounds
/// rounding error of a 32-bit dot product.
fn naive_conv(
    x: &[f32],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f32],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f32]>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut scale = vec![0.0; out.len()];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                    let mut mag = acc.abs();
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sh + i) as isize - ph as isize;
                                let ix = (xx * sw + j) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + iy as usize) * w + ix as usize] as f64;
                                let kv = k[((o * cin + c) * kh + i) * kw + j] as f64;
                                acc += xv * kv;
                                mag += (xv * kv).abs();
                            }
                        }
                    }
                    let at = ((b * cout + o) * oh + y) * ow + xx;
                    out[at] = acc;
                    scale[at] = mag;
                }
            }
        }
    }
    (out, scale, oh, ow)
}

#[test]
fn conv2d_matches_summation_on_1x3x5x5() {
    for seed in 0..200 {
        let x = Tensor::<f32>::randn(&[1, 3, 5, 5], seed).unwrap();
        let k = Tensor::<f32>::randn(&[4, 3, 3, 3], seed + 1000).unwrap();
        let b = Tensor::<f32>::randn(&[4], seed + 2000).unwrap();
        let y = ops::conv2d(&x, &k, Some(&b), Conv2dSpec::same(3, 3)).unwrap();
        let (want, scale, _, _) = naive_conv(x.data(), (1, 3, 5, 5), k.data(), (4, 3, 3), Some(b.data()), (1, 1), (1, 1));
        assert_eq!(y.shape(), &[1, 4, 5, 5]);
        for ((g, w), s) in y.data().iter().zip(&want).zip(&scale) {
            assert!((*g as f64 - w).abs() <= 1e-6 * s.max(1.0), "seed {seed}: {g} vs {w}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_summation(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..8, w in 3usize..8,
        kh in prop::sample::select(vec![1usize, 3]), kw in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, seed in any::<u64>(),
    ) {
        let x = Tensor::<f32>::randn(&[n, cin, h, w], seed).unwrap();
        let k = Tensor::<f32>::randn(&[cout, cin, kh, kw], seed ^ 0x5555).unwrap();
        let spec = Conv2dSpec { stride: (stride, stride), ..Conv2dSpec::same(kh, kw) };
        let y = ops::conv2d(&x, &k, None, spec).unwrap();
        let (want, scale, oh, ow) = naive_conv(x.data(), (n, cin, h, w), k.data(), (cout, kh, kw), None, spec.stride, spec.pad);
        prop_assert_eq!(y.shape(), &[n, cout, oh, ow][..]);
        for ((g, w), s) in y.data().iter().zip(&want).zip(&scale) {
            prop_assert!((*g as f64 - w).abs() <= 1e-6 * s.max(1.0), "{} vs {}", g, w);
        }
    }

    #[test]
    fn dice_jaccard_identity(tp in 0u64..10_000, tn in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let m = metrics_from(&Confusion { tp, tn, fp, fn_ });
        prop_assert!((m.d - 2.0 * m.j / (1.0 + m.j)).abs() <= 1e-12);
        for v in m.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn confusion_matches_brute_force_on_1000_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let density: f64 = rng.gen();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let gt: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(density))).collect();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(&gt) {
            let (p, g) = (p >= 0.5, g == 1.0);
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        let pt = Tensor::new(&[1, 1, h, w], pred).unwrap();
        let gtt = Tensor::new(&[1, 1, h, w], gt).unwrap();
        let c = confusion(&pt, &gtt, 0.5).unwrap()[0];
        assert_eq!(c, Confusion { tp, tn, fp, fn_ });
        assert_eq!(c.total(), (h * w) as u64);

        let m = metrics_from(&c);
        let r = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        assert_eq!(m.acc, r(tp + tn, tp + tn + fp + fn_));
        assert_eq!(m.sn, r(tp, tp + fn_));
        assert_eq!(m.sp, r(tn, tn + fp));
        assert_eq!(m.j, r(tp, tp + fp + fn_));
        assert_eq!(m.d, r(2 * tp, 2 * tp + fp + fn_));
        assert_eq!(m.pr, r(tp, tp + fp));
    }
}

#[test]
fn four_pixel_confusion_case() {
    let pred = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    let gt = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let c = confusion(&pred, &gt, 0.5).unwrap()[0];
    assert_eq!(c, Confusion { tp: 1, tn: 1, fp: 1, fn_: 1 });
    let m = metrics_from(&c);
    assert!((m.j - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!([m.d, m.acc, m.sn, m.sp], [0.5; 4]);
}
