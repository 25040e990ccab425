//! The full segmentation network: a four-stage convolutional encoder with
//! attention-aggregated skips, a dual-attention bottleneck, and a decoder of
//! reconstruction and fusion blocks ending in a sigmoid mask head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Biffm, BiffmConfig, Conv, Ctx, Fmcab, FmcabConfig, Frm, Vitm, VitmConfig};
use crate::params::{expect_channels, Buffers, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

/// Which aggregated skip feeds each decoder block's fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SkipMode {
    /// The deepest skip `s4` feeds every decoder block.
    #[default]
    LiteralS4,
    /// Decoder block `n` (1-based) receives `s_{5−n}`.
    StageMatched,
}

impl SkipMode {
    pub fn name(self) -> &'static str {
        match self {
            SkipMode::LiteralS4 => "literal_s4",
            SkipMode::StageMatched => "stage_matched",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "literal_s4" => Some(SkipMode::LiteralS4),
            "stage_matched" => Some(SkipMode::StageMatched),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// (H, W), both divisible by 16.
    pub input_size: (usize, usize),
    pub encoder_widths: [usize; 4],
    pub decoder_widths: [usize; 4],
    pub vitm: VitmConfig,
    pub fmcab: FmcabConfig,
    pub biffm: BiffmConfig,
    pub skip_mode: SkipMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            input_size: (64, 64),
            encoder_widths: [16, 32, 64, 128],
            decoder_widths: [128, 64, 32, 16],
            vitm: VitmConfig::default(),
            fmcab: FmcabConfig::default(),
            biffm: BiffmConfig::default(),
            skip_mode: SkipMode::LiteralS4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(
                "model.input_size",
                format!("{}×{} is not a positive multiple of 16 on both axes", h, w),
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels", "must be ≥ 1"));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::config("model.encoder_widths", "widths must be positive"));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::config("model.decoder_widths", "widths must be positive"));
        }
        let c = self.encoder_widths[3];
        if self.vitm.heads == 0 || c % self.vitm.heads != 0 || c % 2 != 0 {
            return Err(Error::config(
                "model.vitm.heads",
                format!("bottleneck width {} must be even and divisible by {} heads", c, self.vitm.heads),
            ));
        }
        for &d in &self.decoder_widths {
            if self.biffm.shuffle_groups == 0 || (2 * d) % self.biffm.shuffle_groups != 0 {
                return Err(Error::config(
                    "model.biffm.shuffle_groups",
                    format!("{} groups do not divide decoder fusion width {}", self.biffm.shuffle_groups, 2 * d),
                ));
            }
        }
        self.fmcab.validate()
    }

    /// Widths of the aggregated skips s1..s4 (cumulative sums).
    pub fn skip_widths(&self) -> [usize; 4] {
        let mut out = [0; 4];
        let mut acc = 0;
        for (o, &w) in out.iter_mut().zip(&self.encoder_widths) {
            acc += w;
            *o = acc;
        }
        out
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.input_size.0 / 16, self.input_size.1 / 16)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: Frm,
    fuse: Biffm,
    refine: Frm,
}

/// Every intermediate feature named by the architecture.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    /// Encoder stage outputs B1..B4 (after pooling).
    pub stages: Vec<Tensor<T>>,
    /// Aggregated skips s1..s4.
    pub skips: Vec<Tensor<T>>,
    pub f_enc: Tensor<T>,
    /// Decoder block outputs.
    pub decoder: Vec<Tensor<T>>,
    /// N×1×H×W probabilities.
    pub f_out: Tensor<T>,
}

/// Network structure; values live in a [`ParamStore`] and a [`Buffers`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    encoder: Vec<EncoderStage>,
    fmcab: Vec<Fmcab>,
    vitm: Vitm,
    decoder: Vec<DecoderBlock>,
    head: Conv,
}

impl Model {
    /// Builds the network and its freshly initialized parameters and
    /// running statistics.
    pub fn build<T: Scalar>(config: &ModelConfig) -> Result<(Model, ParamStore<T>, Buffers<T>)> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let mut buffers = Buffers::new();
        let model = {
            let mut root = Scope::new(&mut params, &mut buffers, "");
            let mut encoder = Vec::new();
            let mut cin = config.in_channels;
            for (i, &w) in config.encoder_widths.iter().enumerate() {
                let mut s = root.sub(&format!("enc{}", i + 1));
                encoder.push(EncoderStage {
                    conv1: Conv::new(&mut s, "conv1", cin, w, (3, 3), false)?,
                    bn1: BatchNorm::new(&mut s, "bn1", w)?,
                    conv2: Conv::new(&mut s, "conv2", w, w, (3, 3), false)?,
                    bn2: BatchNorm::new(&mut s, "bn2", w)?,
                });
                cin = w;
            }
            let mut fmcab = Vec::new();
            for (i, &w) in config.encoder_widths.iter().enumerate() {
                fmcab.push(Fmcab::new(&mut root.sub(&format!("fmcab{}", i + 1)), w, config.fmcab)?);
            }
            let c4 = config.encoder_widths[3];
            let vitm = Vitm::new(&mut root.sub("vitm"), c4, config.bottleneck_size(), config.vitm)?;
            let skips = config.skip_widths();
            let mut decoder = Vec::new();
            let mut prev = c4;
            for (i, &d) in config.decoder_widths.iter().enumerate() {
                let mut s = root.sub(&format!("dec{}", i + 1));
                let up = Frm::new(&mut s.sub("up"), prev, d, true)?;
                let uc = up.out_channels();
                let skip_c = match config.skip_mode {
                    SkipMode::LiteralS4 => skips[3],
                    SkipMode::StageMatched => skips[3 - i],
                };
                let fuse = Biffm::new(&mut s.sub("biffm"), uc, skip_c, d, config.biffm)?;
                let refine = Frm::new(&mut s.sub("refine"), 2 * d, d, false)?;
                prev = refine.out_channels() + uc;
                decoder.push(DecoderBlock { up, fuse, refine });
            }
            let head = Conv::new(&mut root, "head", prev, 1, (1, 1), true)?;
            Model {
                config: config.clone(),
                encoder,
                fmcab,
                vitm,
                decoder,
                head,
            }
        };
        Ok((model, params, buffers))
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        expect_channels("model", x, self.config.in_channels)?;
        let (_, _, h, w) = x.dims4("model")?;
        let (eh, ew) = self.config.input_size;
        if h != eh {
            return Err(Error::dim("model", "H", format!("configured for height {}, got {}", eh, h)));
        }
        if w != ew {
            return Err(Error::dim("model", "W", format!("configured for width {}, got {}", ew, w)));
        }
        Ok(())
    }

    /// Stage outputs B1..B4 and aggregated skips s1..s4.
    pub fn encoder_forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        ctx: &mut Ctx<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        self.check_input(x)?;
        let mut stages = Vec::with_capacity(4);
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(4);
        let mut h = x.clone();
        for (stage, att) in self.encoder.iter().zip(&self.fmcab) {
            h = ops::relu(&stage.bn1.forward(p, ctx, &stage.conv1.forward(p, &h)?)?);
            h = ops::relu(&stage.bn2.forward(p, ctx, &stage.conv2.forward(p, &h)?)?);
            h = ops::max_pool2x2(&h)?;
            let a = att.forward(p, &h)?;
            let s = match skips.last() {
                None => a,
                Some(prev) => ops::concat(&[a, ops::max_pool2x2(prev)?], 1)?,
            };
            stages.push(h.clone());
            skips.push(s);
        }
        Ok((stages, skips))
    }

    pub fn forward_trace<T: Scalar>(&self, p: &ParamStore<T>, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let (stages, skips) = self.encoder_forward(p, ctx, x)?;
        let f_enc = self.vitm.forward(p, &stages[3])?;
        let mut decoder = Vec::with_capacity(4);
        let mut prev = f_enc.clone();
        for (i, blk) in self.decoder.iter().enumerate() {
            let u = blk.up.forward(p, ctx, &prev)?;
            let skip = match self.config.skip_mode {
                SkipMode::LiteralS4 => &skips[3],
                SkipMode::StageMatched => &skips[3 - i],
            };
            let fused = blk.fuse.forward(p, &u, skip)?;
            let (_, _, h, w) = u.dims4("decoder")?;
            let refined = blk.refine.forward(p, ctx, &fused)?;
            prev = ops::concat(&[refined, ops::bilinear_resize(&u, h, w)?], 1)?;
            decoder.push(prev.clone());
        }
        let f_out = ops::sigmoid(&self.head.forward(p, &prev)?);
        Ok(ForwardTrace {
            stages,
            skips,
            f_enc,
            decoder,
            f_out,
        })
    }

    /// N×1×H×W mask probabilities.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(p, ctx, x)?.f_out)
    }

    /// Parameter-name prefixes grouped by block kind, for filtered checks.
    pub fn block_prefixes(&self, kind: &str) -> Vec<String> {
        let n = |p: &str| (1..=4).map(|i| format!("{}{}.", p, i)).collect::<Vec<_>>();
        match kind {
            "fmcab" => n("fmcab"),
            "vitm" => alloc::vec!["vitm.".into()],
            "biffm" => (1..=4).map(|i| format!("dec{}.biffm.", i)).collect(),
            "frm" => (1..=4)
                .flat_map(|i| [format!("dec{}.up.", i), format!("dec{}.refine.", i)])
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Total learnable scalar count.
pub fn param_count<T: Scalar>(p: &ParamStore<T>) -> usize {
    p.param_count()
}
