//! Bidirectional feature fusion of a decoder feature with an encoder skip.

use alloc::format;

use super::Conv;
use crate::error::{Error, Result};
use crate::params::{expect_channels, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiffmConfig {
    pub shuffle_groups: usize,
}

impl Default for BiffmConfig {
    fn default() -> Self {
        BiffmConfig { shuffle_groups: 4 }
    }
}

/// Intermediate tensors of one fusion.
#[derive(Clone, Debug)]
pub struct BiffmTrace<T: Scalar> {
    /// Concatenated pooled descriptor, N×2C×1×1.
    pub x: Tensor<T>,
    /// Gate of the separable-convolution path, N×C×1×1.
    pub gate1: Tensor<T>,
    /// Gate of the shuffle path, N×C×1×1.
    pub gate2: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Biffm {
    pub decoder_channels: usize,
    pub skip_channels: usize,
    /// Common fusion width C; the output has 2C channels.
    pub width: usize,
    pub shuffle_groups: usize,
    pub proj_a: Conv,
    pub proj_b: Conv,
    pub gap1x1_a: Conv,
    pub gap1x1_b: Conv,
    pub path1_1x1: Conv,
    pub path1_3x1: Conv,
    pub path1_1x3: Conv,
    pub path2_in: Conv,
    pub path2_out: Conv,
}

impl Biffm {
    pub fn new<T: Scalar>(
        s: &mut Scope<'_, T>,
        decoder_channels: usize,
        skip_channels: usize,
        width: usize,
        cfg: BiffmConfig,
    ) -> Result<Self> {
        let c = width;
        let g = cfg.shuffle_groups;
        if g == 0 || (2 * c) % g != 0 {
            return Err(Error::config(
                "biffm.shuffle_groups",
                format!("{} groups do not divide the {} shuffled channels", g, 2 * c),
            ));
        }
        Ok(Biffm {
            decoder_channels,
            skip_channels,
            width: c,
            shuffle_groups: g,
            proj_a: Conv::new(s, "proj_a", decoder_channels, c, (1, 1), true)?,
            proj_b: Conv::new(s, "proj_b", skip_channels, c, (1, 1), true)?,
            gap1x1_a: Conv::new(s, "gap1x1_a", c, c, (1, 1), true)?,
            gap1x1_b: Conv::new(s, "gap1x1_b", c, c, (1, 1), true)?,
            path1_1x1: Conv::new(s, "path1_1x1", 2 * c, 2 * c, (1, 1), true)?,
            path1_3x1: Conv::new(s, "path1_3x1", 2 * c, 2 * c, (3, 1), true)?,
            path1_1x3: Conv::new(s, "path1_1x3", 2 * c, c, (1, 3), true)?,
            path2_in: Conv::new(s, "path2_in", 2 * c, 2 * c, (1, 1), true)?,
            path2_out: Conv::new(s, "path2_out", 2 * c, c, (1, 1), true)?,
        })
    }

    /// Fuses `d` (N×Cd×H×W) with `s` (N×Cs×Hs×Ws); output N×2C×H×W.
    pub fn forward_trace<T: Scalar>(&self, p: &ParamStore<T>, d: &Tensor<T>, s: &Tensor<T>) -> Result<BiffmTrace<T>> {
        expect_channels("biffm", d, self.decoder_channels)?;
        expect_channels("biffm", s, self.skip_channels)?;
        let (_, _, h, w) = d.dims4("biffm")?;
        let pd = self.proj_a.forward(p, d)?;
        // 1×1 projection commutes with bilinear resizing, so project first.
        let ps = ops::bilinear_resize(&self.proj_b.forward(p, s)?, h, w)?;
        let x1 = ops::global_avg_pool(&pd)?;
        let x2 = ops::global_avg_pool(&ps)?;
        let x = ops::concat(
            &[
                ops::relu(&self.gap1x1_a.forward(p, &x1)?),
                ops::relu(&self.gap1x1_b.forward(p, &x2)?),
            ],
            1,
        )?;
        let a = ops::relu(&self.path1_1x1.forward(p, &x)?);
        let a = ops::relu(&self.path1_3x1.forward(p, &a)?);
        let gate1 = ops::sigmoid(&ops::relu(&self.path1_1x3.forward(p, &a)?));
        let b = ops::relu(&self.path2_in.forward(p, &x)?);
        let b = ops::channel_shuffle(&b, self.shuffle_groups)?;
        let gate2 = ops::sigmoid(&ops::relu(&self.path2_out.forward(p, &b)?));
        let both = ops::mul(&pd, &ps)?;
        let out = ops::concat(&[ops::mul(&both, &gate1)?, ops::mul(&both, &gate2)?], 1)?;
        Ok(BiffmTrace { x, gate1, gate2, out })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, d: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(p, d, s)?.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Buffers;
    use crate::tensor::gradcheck::GradCheck;

    fn block(cd: usize, cs: usize) -> (ParamStore<f64>, Biffm) {
        let mut p = ParamStore::new(5);
        let mut b = Buffers::new();
        let blk = Biffm::new(&mut Scope::new(&mut p, &mut b, "biffm"), cd, cs, cd, BiffmConfig::default()).unwrap();
        (p, blk)
    }

    #[test]
    fn shape_contract_and_gate_range() {
        let (p, blk) = block(16, 40);
        let d = Tensor::<f64>::randn(&[1, 16, 8, 8], 1).unwrap();
        let s = Tensor::<f64>::randn(&[1, 40, 4, 4], 2).unwrap();
        let t = blk.forward_trace(&p, &d, &s).unwrap();
        assert_eq!(t.out.shape(), &[1, 32, 8, 8]);
        assert_eq!(t.x.shape(), &[1, 32, 1, 1]);
        for g in t.gate1.data().iter().chain(t.gate2.data()) {
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn indivisible_shuffle_is_config_error() {
        let mut p = ParamStore::<f64>::new(0);
        let mut b = Buffers::new();
        let res = Biffm::new(&mut Scope::new(&mut p, &mut b, "x"), 3, 3, 3, BiffmConfig { shuffle_groups: 4 });
        assert!(matches!(res, Err(Error::Config { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, blk) = block(4, 4);
        let d = Tensor::<f64>::randn(&[1, 4, 4, 4], 3).unwrap();
        let s = Tensor::<f64>::randn(&[1, 4, 4, 4], 4).unwrap();
        let r = Tensor::<f64>::randn(&[1, 8, 4, 4], 5).unwrap();
        let p = p.jittered(100, 0.1).unwrap();
        let mut gc = GradCheck::new().input("d", &d).input("s", &s);
        for (_, name, t) in p.iter() {
            gc = gc.input(name, t);
        }
        let report = gc
            .run(|v| {
                let q = p.with_values(&v[2..])?;
                ops::weighted_sum(&blk.forward(&q, &v[0], &v[1])?, &r)
            })
            .unwrap();
        assert!(report.max_rel_error() <= 1e-5, "{:?}", report.worst());
    }
}
