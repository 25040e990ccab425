//! Feature reconstruction: optional ×2 upsampling, a dropout/separable
//! convolution branch and a resized identity branch.

use super::{BatchNorm, Ctx, DwsConv};
use crate::error::Result;
use crate::params::{expect_channels, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

/// Dropout probability of the convolution branch.
pub const FRM_DROPOUT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Frm {
    pub cin: usize,
    pub cout: usize,
    pub upsample: bool,
    pub dws: DwsConv,
    pub bn: BatchNorm,
}

impl Frm {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, cin: usize, cout: usize, upsample: bool) -> Result<Self> {
        Ok(Frm {
            cin,
            cout,
            upsample,
            dws: DwsConv::new(s, "dws", cin, cout)?,
            bn: BatchNorm::new(s, "bn", cout)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cout + self.cin
    }

    /// N×Cin×H×W → N×(Cout+Cin)×H'×W'.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_channels("frm", x, self.cin)?;
        let base = if self.upsample { ops::upsample2x(x)? } else { x.clone() };
        let dropped = ops::dropout(&base, FRM_DROPOUT, ctx.mode, ctx.rng)?;
        let branch1 = self.bn.forward(p, ctx, &ops::relu(&self.dws.forward(p, &dropped)?))?;
        ops::concat(&[branch1, base], 1)
    }
}
