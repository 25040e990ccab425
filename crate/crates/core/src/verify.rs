//! Finite-difference gradient suites for each block and the full model,
//! evaluated in 64-bit at a jittered parameter point.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Biffm, BiffmConfig, Ctx, Fmcab, FmcabConfig, Frm, Vitm, VitmConfig};
use crate::params::{Buffers, ParamStore, Scope};
use crate::tensor::gradcheck::{GradCheck, GradReport};
use crate::tensor::{ops, Tensor};
use crate::Mode;

/// Tolerance for individual blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Fmcab,
    Biffm,
    Vitm,
    Frm,
    Model,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Fmcab, Block::Biffm, Block::Vitm, Block::Frm, Block::Model];

    pub fn name(self) -> &'static str {
        match self {
            Block::Fmcab => "fmcab",
            Block::Biffm => "biffm",
            Block::Vitm => "vitm",
            Block::Frm => "frm",
            Block::Model => "model",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|b| b.name() == s)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Block::Model => MODEL_TOLERANCE,
            _ => BLOCK_TOLERANCE,
        }
    }

    /// Parses `all` or a comma-separated list of block names.
    pub fn parse_list(s: &str) -> Result<Vec<Block>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',')
            .map(|p| {
                Block::from_name(p.trim()).ok_or_else(|| {
                    Error::config("blocks", format!("unknown block `{}` (expected all, fmcab, biffm, vitm, frm, model)", p.trim()))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub block: Block,
    pub report: GradReport,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error() <= self.block.tolerance()
    }

    /// Names of checked inputs above tolerance.
    pub fn failing(&self) -> Vec<String> {
        self.report
            .inputs
            .iter()
            .filter(|r| !(r.max_rel_error <= self.block.tolerance()))
            .map(|r| r.name.clone())
            .collect()
    }
}

const JITTER: f64 = 0.1;
/// Smaller for the whole network, whose sigmoid head saturates under
/// larger perturbations.
const MODEL_JITTER: f64 = 0.02;

fn check_with<F>(p: &ParamStore<f64>, extra: &[(&str, &Tensor<f64>)], sample: Option<usize>, mut f: F) -> Result<GradReport>
where
    F: FnMut(&ParamStore<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut gc = GradCheck::new();
    for (name, t) in extra {
        gc = gc.input(*name, t);
    }
    for (_, name, t) in p.iter() {
        gc = gc.input(name, t);
    }
    if let Some(max) = sample {
        gc = gc.sample(max, 17);
    }
    let k = extra.len();
    gc.run(|v| {
        let q = p.with_values(&v[k..])?;
        f(&q, &v[..k])
    })
}

fn fmcab() -> Result<GradReport> {
    let (mut p, mut b) = (ParamStore::new(11), Buffers::new());
    let blk = Fmcab::new(&mut Scope::new(&mut p, &mut b, "fmcab"), 4, FmcabConfig::default())?;
    let p = p.jittered(100, JITTER)?;
    let x = Tensor::<f64>::randn(&[1, 4, 6, 6], 2)?;
    let r = Tensor::<f64>::randn(&[1, 4, 6, 6], 3)?;
    check_with(&p, &[("x", &x)], None, |q, v| ops::weighted_sum(&blk.forward(q, &v[0])?, &r))
}

fn biffm() -> Result<GradReport> {
    let (mut p, mut b) = (ParamStore::new(5), Buffers::new());
    let blk = Biffm::new(&mut Scope::new(&mut p, &mut b, "biffm"), 4, 6, 4, BiffmConfig::default())?;
    let p = p.jittered(100, JITTER)?;
    let d = Tensor::<f64>::randn(&[1, 4, 6, 6], 2)?;
    let s = Tensor::<f64>::randn(&[1, 6, 3, 3], 4)?;
    let r = Tensor::<f64>::randn(&[1, 8, 6, 6], 3)?;
    check_with(&p, &[("d", &d), ("s", &s)], None, |q, v| {
        ops::weighted_sum(&blk.forward(q, &v[0], &v[1])?, &r)
    })
}

fn vitm() -> Result<GradReport> {
    let (mut p, mut b) = (ParamStore::new(9), Buffers::new());
    let blk = Vitm::new(&mut Scope::new(&mut p, &mut b, "vitm"), 4, (6, 6), VitmConfig { heads: 2 })?;
    let p = p.jittered(100, JITTER)?;
    // Channel logits sum over all positions; unit-scale inputs saturate the softmax.
    let x = ops::scale(&Tensor::<f64>::randn(&[1, 4, 6, 6], 2)?, 0.5);
    let r = Tensor::<f64>::randn(&[1, 4, 6, 6], 3)?;
    check_with(&p, &[("x", &x)], None, |q, v| ops::weighted_sum(&blk.forward(q, &v[0])?, &r))
}

fn frm() -> Result<GradReport> {
    let (mut p, mut b) = (ParamStore::new(2), Buffers::new());
    let blk = Frm::new(&mut Scope::new(&mut p, &mut b, "frm"), 4, 4, true)?;
    let p = p.jittered(100, JITTER)?;
    let x = Tensor::<f64>::randn(&[1, 4, 3, 3], 2)?;
    let r = Tensor::<f64>::randn(&[1, 8, 6, 6], 3)?;
    check_with(&p, &[("x", &x)], None, |q, v| {
        let mut bufs = b.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = blk.forward(q, &mut Ctx::new(Mode::Train, &mut rng, &mut bufs), &v[0])?;
        ops::weighted_sum(&y, &r)
    })
}

/// Small configuration used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: (16, 16),
        encoder_widths: [4, 4, 8, 8],
        decoder_widths: [4, 4, 4, 4],
        vitm: VitmConfig { heads: 2 },
        ..ModelConfig::default()
    }
}

fn model() -> Result<GradReport> {
    let (m, p, b) = Model::build::<f64>(&tiny_model_config())?;
    let p = p.jittered(100, MODEL_JITTER)?;
    let x = Tensor::<f64>::randn(&[1, 3, 16, 16], 2)?;
    let r = Tensor::<f64>::randn(&[1, 1, 16, 16], 3)?;
    check_with(&p, &[], Some(6), |q, _| {
        let mut bufs = b.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = m.forward(q, &mut Ctx::new(Mode::Train, &mut rng, &mut bufs), &x)?;
        ops::weighted_sum(&y, &r)
    })
}

pub fn check_block(block: Block) -> Result<BlockResult> {
    let report = match block {
        Block::Fmcab => fmcab()?,
        Block::Biffm => biffm()?,
        Block::Vitm => vitm()?,
        Block::Frm => frm()?,
        Block::Model => model()?,
    };
    Ok(BlockResult { block, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_list_parsing() {
        assert_eq!(Block::parse_list("all").unwrap().len(), 5);
        assert_eq!(Block::parse_list("fmcab, frm").unwrap(), [Block::Fmcab, Block::Frm]);
        assert!(matches!(Block::parse_list("conv"), Err(Error::Config { .. })));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let r = check_block(Block::Model).unwrap();
        assert!(r.passed(), "{:?}", r.report.worst());
        let largest = r.report.inputs.iter().map(|i| i.analytic.abs()).fold(0.0, f64::max);
        assert!(largest > 1e-2, "check point is saturated: {largest}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        use crate::tensor::{corrupt_backward, OpKind};
        corrupt_backward(Some(OpKind::Sigmoid));
        let r = check_block(Block::Fmcab);
        corrupt_backward(None);
        assert!(!r.unwrap().passed());
    }
}
