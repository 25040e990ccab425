//! Grouped 2-D convolution (im2col + GEMM, with direct pointwise and
//! depthwise paths) and the depthwise-separable composition built from it.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::par::map_samples;
use crate::error::{Error, Result};
use crate::scalar::{blas, Scalar};
use crate::tensor::{OpKind, Tensor};

/// Stride, zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            pad: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with padding that preserves spatial extent for odd kernels.
    pub fn same(kh: usize, kw: usize) -> Self {
        Conv2dSpec {
            pad: (kh / 2, kw / 2),
            ..Default::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        range_for(self.wo, self.w, self.sw, self.pw, kj)
    }

    fn row_range(&self, ki: usize) -> (usize, usize) {
        range_for(self.ho, self.h, self.sh, self.ph, ki)
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + k - pad` lies in
/// `[0, extent)`.
fn range_for(out: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= extent - 1
    let limit = extent + pad;
    let hi = if limit > k { ((limit - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Geom> {
    const OP: &str = "conv2d";
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (cout, cin_g, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::dim(
                OP,
                "weight rank",
                format!("expected Cout×Cin/groups×Kh×Kw, got {:?}", w.shape()),
            ))
        }
    };
    let groups = spec.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::config(
            "groups",
            format!("groups={} must divide Cin={} and Cout={}", groups, cin, cout),
        ));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::config("stride", "stride must be positive"));
    }
    if cin_g != cin / groups {
        return Err(Error::dim(
            OP,
            "C",
            format!(
                "input has {} channels; weight expects {} per group × {} groups",
                cin, cin_g, groups
            ),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::dim(OP, "bias", format!("expected [{}], got {:?}", cout, b.shape())));
        }
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    if h + 2 * ph < kh {
        return Err(Error::dim(OP, "H", format!("padded height {} < kernel {}", h + 2 * ph, kh)));
    }
    if wd + 2 * pw < kw {
        return Err(Error::dim(OP, "W", format!("padded width {} < kernel {}", wd + 2 * pw, kw)));
    }
    Ok(Geom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: (h + 2 * ph - kh) / sh + 1,
        wo: (wd + 2 * pw - kw) / sw + 1,
        sh,
        sw,
        ph,
        pw,
        groups,
    })
}

/// Unfolds one group of one sample (`cin_g × H × W`) into `k × Ho·Wo`.
fn im2col<T: Scalar>(g: &Geom, x: &[T], cols: &mut [T]) {
    let op = g.out_plane();
    cols.iter_mut().for_each(|v| *v = T::ZERO);
    for c in 0..g.cin_g() {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.row_range(ki);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                let (ox_lo, ox_hi) = g.col_range(kj);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.sh + ki - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.sw == 1 {
                        let ix0 = ox_lo + kj - g.pw;
                        d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src[ox * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `k × Ho·Wo` columns back onto `cin_g × H × W`, accumulating.
fn col2im<T: Scalar>(g: &Geom, cols: &[T], x: &mut [T]) {
    let op = g.out_plane();
    for c in 0..g.cin_g() {
        let plane = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.row_range(ki);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                let (ox_lo, ox_hi) = g.col_range(kj);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.sh + ki - g.ph;
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        d[ox * g.sw + kj - g.pw] += s[ox];
                    }
                }
            }
        }
    }
}

/// One channel of a depthwise convolution: `out += conv(x, k)`.
fn depthwise_plane<T: Scalar>(g: &Geom, x: &[T], k: &[T], out: &mut [T]) {
    for ki in 0..g.kh {
        let (oy_lo, oy_hi) = g.row_range(ki);
        for kj in 0..g.kw {
            let wv = k[ki * g.kw + kj];
            let (ox_lo, ox_hi) = g.col_range(kj);
            for oy in oy_lo..oy_hi {
                let iy = oy * g.sh + ki - g.ph;
                let src = &x[iy * g.w..(iy + 1) * g.w];
                let d = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if g.sw == 1 {
                    let ix0 = ox_lo + kj - g.pw;
                    d[ox_lo..ox_hi]
                        .iter_mut()
                        .zip(&src[ix0..ix0 + (ox_hi - ox_lo)])
                        .for_each(|(o, &v)| *o += wv * v);
                } else {
                    for ox in ox_lo..ox_hi {
                        d[ox] += wv * src[ox * g.sw + kj - g.pw];
                    }
                }
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Backward of [`depthwise_plane`]: accumulates into `gx` and `gk`.
fn depthwise_plane_backward<T: Scalar>(
    g: &Geom,
    x: &[T],
    k: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    for ki in 0..g.kh {
        let (oy_lo, oy_hi) = g.row_range(ki);
        for kj in 0..g.kw {
            let tap = ki * g.kw + kj;
            let wv = k[tap];
            let (ox_lo, ox_hi) = g.col_range(kj);
            let mut acc = T::ZERO;
            for oy in oy_lo..oy_hi {
                let iy = oy * g.sh + ki - g.ph;
                let go = &gout[oy * g.wo..(oy + 1) * g.wo];
                let xrow = &x[iy * g.w..(iy + 1) * g.w];
                if g.sw == 1 {
                    let ix0 = ox_lo + kj - g.pw;
                    let len = ox_hi - ox_lo;
                    let go = &go[ox_lo..ox_hi];
                    acc += dot(go, &xrow[ix0..ix0 + len]);
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[iy * g.w + ix0..iy * g.w + ix0 + len]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(a, &v)| *a += wv * v);
                    }
                    continue;
                }
                for ox in ox_lo..ox_hi {
                    let ix = ox * g.sw + kj - g.pw;
                    acc += go[ox] * xrow[ix];
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gxr = &mut gx[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        gxr[ox * g.sw + kj - g.pw] += wv * go[ox];
                    }
                }
            }
            if let Some(gk) = gk.as_deref_mut() {
                gk[tap] += acc;
            }
        }
    }
}

fn forward_sample<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (cig, cog, k) = (g.cin_g(), g.cout_g(), g.k());
    let (ip, op) = (g.in_plane(), g.out_plane());
    if g.is_depthwise() {
        for c in 0..g.cin {
            depthwise_plane(g, &x[c * ip..(c + 1) * ip], &w[c * k..(c + 1) * k], &mut out[c * op..(c + 1) * op]);
        }
    } else {
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * op] };
        for grp in 0..g.groups {
            let xg = &x[grp * cig * ip..(grp + 1) * cig * ip];
            let wg = &w[grp * cog * k..(grp + 1) * cog * k];
            let og = &mut out[grp * cog * op..(grp + 1) * cog * op];
            if g.is_pointwise() {
                blas::mm(wg, xg, og, cog, k, op, true);
            } else {
                im2col(g, xg, &mut cols);
                blas::mm(wg, &cols, og, cog, k, op, true);
            }
        }
    }
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            out[c * op..(c + 1) * op].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Input gradient and per-sample weight gradient of one sample.
fn backward_sample<T: Scalar>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_gx: bool,
    need_gw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cig, cog, k) = (g.cin_g(), g.cout_g(), g.k());
    let (ip, op) = (g.in_plane(), g.out_plane());
    let mut gx = need_gx.then(|| vec![T::ZERO; g.cin * ip]);
    let mut gw = need_gw.then(|| vec![T::ZERO; g.cout * k]);
    if g.is_depthwise() {
        for c in 0..g.cin {
            depthwise_plane_backward(
                g,
                &x[c * ip..(c + 1) * ip],
                &w[c * k..(c + 1) * k],
                &gout[c * op..(c + 1) * op],
                gx.as_deref_mut().map(|v| &mut v[c * ip..(c + 1) * ip]),
                gw.as_deref_mut().map(|v| &mut v[c * k..(c + 1) * k]),
            );
        }
        return (gx, gw);
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * op] };
    for grp in 0..g.groups {
        let xg = &x[grp * cig * ip..(grp + 1) * cig * ip];
        let wg = &w[grp * cog * k..(grp + 1) * cog * k];
        let go = &gout[grp * cog * op..(grp + 1) * cog * op];
        if let Some(gw) = gw.as_deref_mut() {
            let gwg = &mut gw[grp * cog * k..(grp + 1) * cog * k];
            if g.is_pointwise() {
                blas::mm_nt(go, xg, gwg, cog, op, k, true);
            } else {
                im2col(g, xg, &mut cols);
                blas::mm_nt(go, &cols, gwg, cog, op, k, true);
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxg = &mut gx[grp * cig * ip..(grp + 1) * cig * ip];
            if g.is_pointwise() {
                blas::mm_tn(wg, go, gxg, k, cog, op, true);
            } else {
                blas::mm_tn(wg, go, &mut cols, k, cog, op, false);
                col2im(g, &cols, gxg);
            }
        }
    }
    (gx, gw)
}

/// 2-D convolution of N×Cin×H×W input with Cout×(Cin/groups)×Kh×Kw weights
/// over the zero-padded input.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = geometry(x, w, b, spec)?;
    let (in_len, out_len) = (g.cin * g.in_plane(), g.cout * g.out_plane());
    let xd = x.data();
    let wd = w.data();
    let bd = b.map(|b| b.data());
    let chunks = map_samples(g.n, |i| {
        let mut out = vec![T::ZERO; out_len];
        forward_sample(&g, &xd[i * in_len..(i + 1) * in_len], wd, bd, &mut out);
        out
    });
    let mut out = Vec::with_capacity(g.n * out_len);
    chunks.into_iter().for_each(|c| out.extend_from_slice(&c));

    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![g.n, g.cout, g.ho, g.wo],
        out,
        OpKind::Conv2d,
        inputs,
        Box::new(move |args| {
            let (x, w) = (&args.inputs[0], &args.inputs[1]);
            let (need_gx, need_gw) = (x.requires_grad(), w.requires_grad());
            let (xd, wd, gd) = (x.data(), w.data(), args.grad);
            let per_sample = map_samples(g.n, |i| {
                backward_sample(
                    &g,
                    &xd[i * in_len..(i + 1) * in_len],
                    wd,
                    &gd[i * out_len..(i + 1) * out_len],
                    need_gx,
                    need_gw,
                )
            });
            let mut gx = need_gx.then(|| Vec::with_capacity(g.n * in_len));
            let mut gw = need_gw.then(|| vec![T::ZERO; wd.len()]);
            for (sx, sw) in per_sample {
                if let (Some(acc), Some(s)) = (gx.as_mut(), sx) {
                    acc.extend_from_slice(&s);
                }
                if let (Some(acc), Some(s)) = (gw.as_mut(), sw) {
                    acc.iter_mut().zip(&s).for_each(|(a, &b)| *a += b);
                }
            }
            let mut grads = vec![gx, gw];
            if let Some(b) = args.inputs.get(2) {
                grads.push(b.requires_grad().then(|| {
                    let op = g.out_plane();
                    let mut gb = vec![T::ZERO; g.cout];
                    for i in 0..g.n {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let s = (i * g.cout + c) * op;
                            *acc += gd[s..s + op].iter().copied().sum::<T>();
                        }
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Depthwise 3×3 convolution (groups = Cin, pad 1) followed by a pointwise
/// 1×1 convolution. `dw` is Cin×1×3×3 and `pw` is Cout×Cin×1×1.
pub fn dws_conv3x3<T: Scalar>(
    x: &Tensor<T>,
    dw: &Tensor<T>,
    dw_bias: Option<&Tensor<T>>,
    pw: &Tensor<T>,
    pw_bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let cin = x.dims4("dws_conv3x3")?.1;
    let depth = conv2d(x, dw, dw_bias, Conv2dSpec::same(3, 3).with_groups(cin))?;
    conv2d(&depth, pw, pw_bias, Conv2dSpec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, GradCheck};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn pointwise_affine_scaling() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[1.0]);
        let y = conv2d(&x, &w, Some(&b), Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn all_ones_3x3_padded_sums_window() {
        // every 3×3 window over the zero-padded 2×2 input covers all four pixels
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = conv2d(&x, &w, None, Conv2dSpec::same(3, 3)).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let y = conv2d(&x, &t(&[1, 1, 3, 3], &k), None, Conv2dSpec::same(3, 3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn stride_two_output_extent() {
        let x = Tensor::<f64>::zeros(&[2, 3, 7, 6]).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]).unwrap();
        let spec = Conv2dSpec {
            stride: (2, 2),
            pad: (1, 1),
            groups: 1,
        };
        assert_eq!(conv2d(&x, &w, None, spec).unwrap().shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn errors_name_the_problem() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]).unwrap();
        match conv2d(&x, &w, None, Conv2dSpec::same(3, 3)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "C"),
            other => panic!("{other:?}"),
        }
        let w = Tensor::<f64>::zeros(&[4, 1, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dSpec::same(3, 3).with_groups(2)),
            Err(Error::Config { .. })
        ));
        let w = Tensor::<f64>::zeros(&[4, 3, 7, 7]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dSpec::default()),
            Err(Error::Dimension { axis: "H", .. })
        ));
    }

    #[test]
    fn dws_identity_and_constant_interior() {
        let x = t(&[1, 2, 3, 3], &(0..18).map(|v| v as f64).collect::<Vec<_>>());
        let mut dk = vec![0.0; 18];
        dk[4] = 1.0;
        dk[13] = 1.0;
        let dw = t(&[2, 1, 3, 3], &dk);
        let pw = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = dws_conv3x3(&x, &dw, None, &pw, None).unwrap();
        assert_eq!(y.data(), x.data());

        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 1.5).unwrap();
        let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let depth = conv2d(&c, &ones, None, Conv2dSpec::same(3, 3).with_groups(1)).unwrap();
        // interior pixels see the full 3×3 window
        assert_eq!(depth.data()[5], 9.0 * 1.5);
        assert_eq!(depth.data()[10], 9.0 * 1.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = [
            (Conv2dSpec::same(3, 3), [4, 2, 3, 3]),
            (Conv2dSpec::default(), [4, 2, 1, 1]),
            (Conv2dSpec { stride: (2, 1), pad: (1, 0), groups: 2 }, [4, 1, 3, 1]),
            (Conv2dSpec::same(3, 3).with_groups(2), [2, 1, 3, 3]),
        ];
        for (i, (spec, wshape)) in specs.iter().enumerate() {
            let x = crate::testutil::randn(&[2, 2, 5, 4], 10 + i as u64);
            let w = crate::testutil::randn(wshape, 20 + i as u64);
            let b = crate::testutil::randn(&[wshape[0]], 30 + i as u64);
            let r = crate::testutil::randn(&[2, wshape[0], 1, 1], 40 + i as u64);
            let report = GradCheck::new()
                .input("x", &x)
                .input("w", &w)
                .input("b", &b)
                .run(|v| {
                    let y = conv2d(&v[0], &v[1], Some(&v[2]), *spec)?;
                    crate::tensor::ops::weighted_sum(&y, &r)
                })
                .unwrap();
            assert!(report.max_rel_error() <= 1e-5, "spec {spec:?}: {report:?}");
        }
        let x = crate::testutil::randn(&[1, 3, 4, 4], 5);
        let err = finite_diff_check(
            |x| {
                let w = crate::testutil::randn(&[2, 3, 3, 3], 6);
                let y = conv2d(x, &w, None, Conv2dSpec::same(3, 3))?;
                Ok(crate::tensor::ops::sum(&crate::tensor::ops::mul(&y, &y)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
