use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKind, Tensor};

/// Source taps for one output coordinate under align-corners sampling.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return Tap { lo: 0, hi: 0, frac: T::ZERO };
            }
            // exact rational position o·(in−1)/(out−1)
            let num = o * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = if rem == 0 { lo } else { lo + 1 };
            Tap {
                lo,
                hi,
                frac: T::from_f64(rem as f64 / den as f64),
            }
        })
        .collect()
}

/// Bilinear resize of N×C×H×W to N×C×out_h×out_w with align-corners
/// sampling: corner pixels map exactly, and resizing to the input size
/// returns the input unchanged.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize", "output", "target extents must be ≥ 1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ys = taps::<T>(h, out_h);
    let xs = taps::<T>(w, out_w);
    let (ip, op) = (h * w, out_h * out_w);
    let xd = x.data();
    let mut out = vec![T::ZERO; n * c * op];
    let mut row = vec![T::ZERO; w];
    for (src, dst) in xd.chunks(ip).zip(out.chunks_mut(op)) {
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            let fy = ty.frac;
            row.iter_mut()
                .zip(r0.iter().zip(r1))
                .for_each(|(o, (&a, &b))| *o = a + (b - a) * fy);
            let d = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (o, tx) in d.iter_mut().zip(&xs) {
                let (a, b) = (row[tx.lo], row[tx.hi]);
                *o = a + (b - a) * tx.frac;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        OpKind::Resize,
        vec![x.clone()],
        Box::new(move |args| {
            let mut gx = vec![T::ZERO; n * c * ip];
            let mut grow = vec![T::ZERO; w];
            for (g, dst) in args.grad.chunks(op).zip(gx.chunks_mut(ip)) {
                for (oy, ty) in ys.iter().enumerate() {
                    grow.iter_mut().for_each(|v| *v = T::ZERO);
                    for (&gv, tx) in g[oy * out_w..(oy + 1) * out_w].iter().zip(&xs) {
                        grow[tx.lo] += gv * (T::ONE - tx.frac);
                        grow[tx.hi] += gv * tx.frac;
                    }
                    let fy = ty.frac;
                    dst[ty.lo * w..(ty.lo + 1) * w]
                        .iter_mut()
                        .zip(&grow)
                        .for_each(|(o, &gv)| *o += gv * (T::ONE - fy));
                    dst[ty.hi * w..(ty.hi + 1) * w]
                        .iter_mut()
                        .zip(&grow)
                        .for_each(|(o, &gv)| *o += gv * fy);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// ×2 bilinear upsampling.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("upsample2x")?;
    bilinear_resize(x, 2 * h, 2 * w)
}
