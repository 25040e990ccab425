//! Focal-modulation convolutional attention block.

use alloc::format;

use super::{Conv, LayerNorm};
use crate::error::{Error, Result};
use crate::params::{expect_channels, ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmcabConfig {
    /// Squeeze-excitation reduction ratio.
    pub reduction: usize,
    /// Fixed exponent applied to the learnable `gamma`.
    pub p_exponent: f64,
}

impl Default for FmcabConfig {
    fn default() -> Self {
        FmcabConfig {
            reduction: 4,
            p_exponent: 1.0,
        }
    }
}

impl FmcabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::config("fmcab.reduction", "must be ≥ 1"));
        }
        if !(self.p_exponent > 0.0 && self.p_exponent.is_finite()) {
            return Err(Error::config(
                "fmcab.p_exponent",
                format!("must be a positive finite number, got {}", self.p_exponent),
            ));
        }
        Ok(())
    }
}

/// Gate driven by the gap between average- and max-pooled descriptors.
#[derive(Clone, Debug)]
pub struct FocalModulation {
    pub gate_conv: Conv,
    pub gamma: ParamId,
    pub alpha: ParamId,
    pub p_exponent: f64,
}

impl FocalModulation {
    /// Returns `(γ^p · gate ⊗ x, gate)` with
    /// `gate = σ(fm_gate((GAP(x) − GMP(x)) · α))`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = ops::sub(&ops::global_avg_pool(x)?, &ops::global_max_pool(x)?)?;
        let d = ops::mul(&d, p.get(self.alpha))?;
        let gate = ops::sigmoid(&self.gate_conv.forward(p, &d)?);
        let gp = ops::pow(p.get(self.gamma), T::from_f64(self.p_exponent));
        let out = ops::mul(&ops::mul(x, &gate)?, &gp)?;
        Ok((out, gate))
    }
}

/// Intermediate tensors of one block evaluation.
#[derive(Clone, Debug)]
pub struct FmcabTrace<T: Scalar> {
    pub i1: Tensor<T>,
    /// Channel gate of the squeeze-excitation step, N×C×1×1.
    pub se_gate: Tensor<T>,
    pub i2: Tensor<T>,
    /// Focal-modulation gate, N×C×1×1.
    pub fm_gate: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Fmcab {
    pub channels: usize,
    pub ln: LayerNorm,
    pub conv3a: Conv,
    pub conv1a: Conv,
    pub se_reduce: Conv,
    pub se_expand: Conv,
    pub fm: FocalModulation,
    pub branch_conv3: Conv,
    pub branch_ln: LayerNorm,
    pub branch_conv1: Conv,
}

impl Fmcab {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize, cfg: FmcabConfig) -> Result<Self> {
        cfg.validate()?;
        let c = channels;
        let cr = (c / cfg.reduction).max(1);
        Ok(Fmcab {
            channels: c,
            ln: LayerNorm::new(s, "ln", c)?,
            conv3a: Conv::new(s, "conv3a", c, c, (3, 3), true)?,
            conv1a: Conv::new(s, "conv1a", c, c, (1, 1), true)?,
            se_reduce: Conv::new(s, "se_reduce", c, cr, (1, 1), true)?,
            se_expand: Conv::new(s, "se_expand", cr, c, (1, 1), true)?,
            fm: FocalModulation {
                gate_conv: Conv::new(s, "fm_gate", c, c, (1, 1), true)?,
                gamma: s.constant("gamma", &[1], 1.0)?,
                alpha: s.constant("alpha", &[1], 1.0)?,
                p_exponent: cfg.p_exponent,
            },
            branch_conv3: Conv::new(s, "branch_conv3", c, c, (3, 3), true)?,
            branch_ln: LayerNorm::new(s, "branch_ln", c)?,
            branch_conv1: Conv::new(s, "branch_conv1", c, c, (1, 1), true)?,
        })
    }

    pub fn forward_trace<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<FmcabTrace<T>> {
        expect_channels("fmcab", x, self.channels)?;
        let i1 = ops::relu(&self.conv1a.forward(p, &self.conv3a.forward(p, &self.ln.forward(p, x)?)?)?);
        let squeezed = ops::global_avg_pool(&ops::relu(&self.se_reduce.forward(p, &i1)?))?;
        let se_gate = ops::sigmoid(&self.se_expand.forward(p, &ops::relu(&squeezed))?);
        let i2 = ops::mul(&i1, &se_gate)?;
        let (modulated, fm_gate) = self.fm.forward(p, &i2)?;
        let b2 = self.branch_ln.forward(p, &self.branch_conv3.forward(p, x)?)?;
        let b3 = self.branch_conv1.forward(p, &ops::gelu(x))?;
        let out = ops::sum_all(&[modulated, b2, b3, i1.clone()])?;
        Ok(FmcabTrace {
            i1,
            se_gate,
            i2,
            fm_gate,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(p, x)?.out)
    }
}
