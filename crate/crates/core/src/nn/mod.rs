//! Parameterized layers and the attention/fusion blocks built from them.

mod biffm;
mod fmcab;
mod frm;
mod vitm;

pub use biffm::{Biffm, BiffmConfig, BiffmTrace};
pub use fmcab::{Fmcab, FmcabConfig, FmcabTrace, FocalModulation};
pub use frm::Frm;
pub use vitm::{Attention, Vitm, VitmConfig};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{BufferId, Buffers, ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, Conv2dSpec};
use crate::tensor::Tensor;
use crate::Mode;

/// Per-forward mutable context: mode, dropout randomness and batch-norm
/// running statistics.
pub struct Ctx<'a, T: Scalar> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    pub buffers: &'a mut Buffers<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(mode: Mode, rng: &'a mut ChaCha8Rng, buffers: &'a mut Buffers<T>) -> Self {
        Ctx { mode, rng, buffers }
    }
}

/// Convolution with spatially preserving padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let weight = s.kaiming_uniform("weight", &[cout, cin, kernel.0, kernel.1])?;
        let bias = if bias {
            Some(s.constant("bias", &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            spec: Conv2dSpec::same(kernel.0, kernel.1),
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }
}

/// Per-channel scale and shift of a normalization layer.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, c: usize) -> Result<Self> {
        Ok(Affine {
            weight: s.constant("weight", &[c], 1.0)?,
            bias: s.constant("bias", &[c], 0.0)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub affine: Affine,
}

impl LayerNorm {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, name: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            affine: Affine::new(&mut s.sub(name), c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(
            x,
            Some(p.get(self.affine.weight)),
            Some(p.get(self.affine.bias)),
            T::from_f64(ops::NORM_EPS),
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub affine: Affine,
    pub stats: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = s.sub(name);
        let affine = Affine::new(&mut s, c)?;
        let stats = s.running_stats("running", c)?;
        Ok(BatchNorm { affine, stats })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = ctx.buffers.get_mut(self.stats)?;
        ops::batch_norm(
            x,
            Some(p.get(self.affine.weight)),
            Some(p.get(self.affine.bias)),
            T::from_f64(ops::NORM_EPS),
            ctx.mode,
            Some(stats),
        )
    }
}

/// Depthwise 3×3 followed by a biased pointwise 1×1.
#[derive(Clone, Debug)]
pub struct DwsConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
}

impl DwsConv {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(DwsConv {
            depthwise: s.kaiming_uniform("depthwise", &[cin, 1, 3, 3])?,
            pointwise: s.kaiming_uniform("pointwise", &[cout, cin, 1, 1])?,
            bias: s.constant("bias", &[cout], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::dws_conv3x3(x, p.get(self.depthwise), None, p.get(self.pointwise), Some(p.get(self.bias)))
    }
}
