//! Dual self-attention bottleneck: channel attention (TSA) and global
//! spatial attention (GSA), fused by a 1×1 convolution with a residual.

use alloc::format;

use super::Conv;
use crate::error::{Error, Result};
use crate::params::{expect_channels, ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitmConfig {
    pub heads: usize,
}

impl Default for VitmConfig {
    fn default() -> Self {
        VitmConfig { heads: 4 }
    }
}

/// Attention output together with its row-stochastic score matrix.
#[derive(Clone, Debug)]
pub struct Attention<T: Scalar> {
    pub out: Tensor<T>,
    /// TSA: (N·heads)×c_h×c_h. GSA: N×(H·W)×(H·W).
    pub scores: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Vitm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    /// (H·W)×C additive position table.
    pub pos_embed: ParamId,
    pub gsa_embed_c: Conv,
    pub gsa_embed_half: Conv,
    pub fuse: Conv,
}

impl Vitm {
    /// Bottleneck over C×H×W feature maps.
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize, hw: (usize, usize), cfg: VitmConfig) -> Result<Self> {
        let c = channels;
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(Error::config(
                "vitm.heads",
                format!("{} channels are not divisible by {} heads", c, cfg.heads),
            ));
        }
        if c % 2 != 0 {
            return Err(Error::config("vitm.channels", format!("must be even, got {}", c)));
        }
        Ok(Vitm {
            channels: c,
            height: hw.0,
            width: hw.1,
            heads: cfg.heads,
            wq: Conv::new(s, "wq", c, c, (1, 1), true)?,
            wk: Conv::new(s, "wk", c, c, (1, 1), true)?,
            wv: Conv::new(s, "wv", c, c, (1, 1), true)?,
            pos_embed: s.constant("pos_embed", &[hw.0 * hw.1, c], 0.0)?,
            gsa_embed_c: Conv::new(s, "gsa_embed_c", c, c, (1, 1), true)?,
            gsa_embed_half: Conv::new(s, "gsa_embed_half", c, c / 2, (1, 1), true)?,
            fuse: Conv::new(s, "fuse", 2 * c, c, (1, 1), true)?,
        })
    }

    fn check(&self, x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
        expect_channels("vitm", x, self.channels)?;
        let (n, _, h, w) = x.dims4("vitm")?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::config(
                "vitm.pos_embed",
                format!("table covers {}×{} positions, input is {}×{}", self.height, self.width, h, w),
            ));
        }
        Ok((n, h, w))
    }

    /// Channel self-attention: per head, `S = softmax(K_h·Q_hᵀ/√c_h)` of
    /// size c_h×c_h, applied to `V_h`.
    pub fn tsa<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Attention<T>> {
        let (n, h, w) = self.check(x)?;
        let c = self.channels;
        let (hw, ch) = (h * w, c / self.heads);
        let pos = ops::reshape(&ops::permute(p.get(self.pos_embed), &[1, 0])?, &[1, c, h, w])?;
        let tokens = ops::add(x, &pos)?;
        let heads = [n * self.heads, ch, hw];
        let q = ops::reshape(&self.wq.forward(p, &tokens)?, &heads)?;
        let k = ops::reshape(&self.wk.forward(p, &tokens)?, &heads)?;
        let v = ops::reshape(&self.wv.forward(p, &tokens)?, &heads)?;
        let logits = ops::matmul(&k, &ops::permute(&q, &[0, 2, 1])?)?;
        let scale = T::ONE / T::from_usize(ch).sqrt();
        let scores = ops::softmax(&ops::scale(&logits, scale), 2)?;
        let out = ops::reshape(&ops::matmul(&scores, &v)?, &[n, c, h, w])?;
        Ok(Attention { out, scores })
    }

    /// Global spatial attention: `S = softmax(F1·F2/√c')` over positions,
    /// applied to the full-width embedding.
    pub fn gsa<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Attention<T>> {
        let (n, h, w) = self.check(x)?;
        let c = self.channels;
        let (hw, half) = (h * w, c / 2);
        let fc = ops::reshape(&self.gsa_embed_c.forward(p, x)?, &[n, c, hw])?;
        let f2 = ops::reshape(&self.gsa_embed_half.forward(p, x)?, &[n, half, hw])?;
        let f1 = ops::permute(&f2, &[0, 2, 1])?;
        let scale = T::ONE / T::from_usize(half).sqrt();
        let scores = ops::softmax(&ops::scale(&ops::matmul(&f1, &f2)?, scale), 2)?;
        let attended = ops::matmul(&scores, &ops::permute(&fc, &[0, 2, 1])?)?;
        let out = ops::reshape(&ops::permute(&attended, &[0, 2, 1])?, &[n, c, h, w])?;
        Ok(Attention { out, scores })
    }

    /// `fuse(TSA(x) © GSA(x)) + x`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let t = self.tsa(p, x)?.out;
        let g = self.gsa(p, x)?.out;
        ops::add(&self.fuse.forward(p, &ops::concat(&[t, g], 1)?)?, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Buffers;
    use crate::tensor::gradcheck::GradCheck;

    fn block(c: usize, hw: (usize, usize), heads: usize) -> (ParamStore<f64>, Vitm) {
        let mut p = ParamStore::new(9);
        let mut b = Buffers::new();
        let blk = Vitm::new(&mut Scope::new(&mut p, &mut b, "vitm"), c, hw, VitmConfig { heads }).unwrap();
        (p, blk)
    }

    fn rows_are_distributions(s: &Tensor<f64>) {
        let len = *s.shape().last().unwrap();
        for row in s.data().chunks(len) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shapes_and_attention_rows() {
        let (p, blk) = block(8, (4, 4), 2);
        let x = Tensor::<f64>::randn(&[2, 8, 4, 4], 1).unwrap();
        let t = blk.tsa(&p, &x).unwrap();
        let g = blk.gsa(&p, &x).unwrap();
        assert_eq!(t.out.shape(), &[2, 8, 4, 4]);
        assert_eq!(t.scores.shape(), &[4, 4, 4]);
        assert_eq!(g.out.shape(), &[2, 8, 4, 4]);
        assert_eq!(g.scores.shape(), &[2, 16, 16]);
        rows_are_distributions(&t.scores);
        rows_are_distributions(&g.scores);
        assert_eq!(blk.forward(&p, &x).unwrap().shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn zero_fuse_is_identity() {
        let (mut p, blk) = block(16, (4, 4), 4);
        p.set(blk.fuse.weight, &Tensor::zeros(&[16, 32, 1, 1]).unwrap()).unwrap();
        let x = Tensor::<f64>::randn(&[1, 16, 4, 4], 2).unwrap();
        assert_eq!(blk.forward(&p, &x).unwrap().data(), x.data());
    }

    #[test]
    fn pos_table_mismatch_is_config_error() {
        let (p, blk) = block(8, (4, 4), 2);
        let x = Tensor::<f64>::randn(&[1, 8, 2, 2], 2).unwrap();
        assert!(matches!(blk.forward(&p, &x), Err(Error::Config { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, blk) = block(4, (3, 3), 2);
        let x = Tensor::<f64>::randn(&[1, 4, 3, 3], 3).unwrap();
        let r = Tensor::<f64>::randn(&[1, 4, 3, 3], 4).unwrap();
        let p = p.jittered(100, 0.1).unwrap();
        let mut gc = GradCheck::new().input("x", &x);
        for (_, name, t) in p.iter() {
            gc = gc.input(name, t);
        }
        let report = gc
            .run(|v| {
                let q = p.with_values(&v[1..])?;
                ops::weighted_sum(&blk.forward(&q, &v[0])?, &r)
            })
            .unwrap();
        assert!(report.max_rel_error() <= 1e-5, "{:?}", report.worst());
    }
}
