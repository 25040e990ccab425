//! Synthetic lesion images, rotation/brightness augmentation, hold-out and
//! k-fold partitioning, and batch assembly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rotation step of the augmentation grid, in degrees.
pub const ROTATION_STEP: u32 = 30;
/// Brightness factors of the augmentation grid.
pub const BRIGHTNESS: [f32; 3] = [1.0, 0.8, 1.2];
/// Foreground fraction bounds enforced by the generator.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.6);

/// An RGB image (3×H×W, values in [0, 1]) with its binary mask (1×H×W).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.image.shape() == other.image.shape()
            && self.image.data() == other.image.data()
            && self.mask.shape() == other.mask.shape()
            && self.mask.data() == other.mask.data()
    }
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim("sample", "rank", format!("image {:?} is not C×H×W", image.shape()))),
        };
        if c != 3 {
            return Err(Error::dim("sample", "C", format!("image `{}` has {} channels, expected 3", id, c)));
        }
        if mask.shape() != [1, h, w] {
            return Err(Error::dim(
                "sample",
                "H",
                format!("mask {:?} does not match image {}×{} of `{}`", mask.shape(), h, w, id),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Usage(format!("mask of `{}` is not binary", id)));
        }
        Ok(Sample { image, mask, id })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / self.mask.numel() as f64
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        libm::sqrt((u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry))
    }
}

fn one_synthetic(rng: &mut ChaCha8Rng, h: usize, w: usize, id: String) -> Result<Sample> {
    let side = h.min(w) as f64;
    let (lo, hi) = FOREGROUND_RANGE;
    let (blobs, mask) = loop {
        let count = rng.gen_range(1..=3);
        let blobs: Vec<Ellipse> = (0..count)
            .map(|_| {
                let t = rng.gen_range(0.0..core::f64::consts::PI);
                Ellipse {
                    cy: rng.gen_range(0.2..0.8) * h as f64,
                    cx: rng.gen_range(0.2..0.8) * w as f64,
                    ry: rng.gen_range(0.08..0.3) * side,
                    rx: rng.gen_range(0.08..0.3) * side,
                    cos: libm::cos(t),
                    sin: libm::sin(t),
                }
            })
            .collect();
        let mut mask = vec![0.0f32; h * w];
        for (i, m) in mask.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            if blobs.iter().any(|b| b.radius(y, x) < 1.0) {
                *m = 1.0;
            }
        }
        let frac = mask.iter().filter(|&&v| v > 0.0).count() as f64 / (h * w) as f64;
        if (lo..=hi).contains(&frac) {
            break (blobs, mask);
        }
    };

    let base: [f64; 3] = [rng.gen_range(0.45..0.6), rng.gen_range(0.3..0.45), rng.gen_range(0.25..0.4)];
    let shift: [f64; 3] = [rng.gen_range(0.15..0.3), rng.gen_range(-0.05..0.05), rng.gen_range(-0.2..-0.08)];
    let (fy, fx, phase) = (
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.0..core::f64::consts::TAU),
    );
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let mut image = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        let texture = 0.04 * libm::sin(fy * y + fx * x + phase);
        let r = blobs.iter().map(|b| b.radius(y, x)).fold(f64::INFINITY, f64::min);
        let inside = 1.0 / (1.0 + libm::exp((r - 1.0) / 0.06));
        for c in 0..3 {
            let v = base[c] + texture + inside * shift[c] + noise.sample(rng);
            image[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Sample::new(Tensor::new(&[3, h, w], image)?, Tensor::new(&[1, h, w], mask)?, id)
}

/// `n` synthetic samples of 1 to 3 soft-edged ellipses on a textured
/// background. Sample `i` depends only on `(seed, i)`; ids are `syn_00000`,
/// `syn_00001`, ...
pub fn generate_synthetic(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("synth.n", "at least one sample is required"));
    }
    if size.0 < 8 || size.1 < 8 {
        return Err(Error::config("synth.size", format!("{}×{} is too small, need at least 8×8", size.0, size.1)));
    }
    (0..n)
        .map(|i| one_synthetic(&mut sample_rng(seed, i as u64), size.0, size.1, format!("syn_{:05}", i)))
        .collect()
}

fn check_augment(rotation_deg: u32, brightness: f32) -> Result<()> {
    if rotation_deg % ROTATION_STEP != 0 || rotation_deg >= 360 {
        return Err(Error::config(
            "augment.rotation",
            format!("{}° is not a multiple of {}° below 360°", rotation_deg, ROTATION_STEP),
        ));
    }
    if !BRIGHTNESS.contains(&brightness) {
        return Err(Error::config(
            "augment.brightness",
            format!("factor {} is not one of {:?}", brightness, BRIGHTNESS),
        ));
    }
    Ok(())
}

/// Source index of output pixel `(y, x)` for quarter turns, when exact.
fn quarter_turn(quarter: u32, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    match quarter {
        0 => (y, x),
        1 => (x, w - 1 - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (h - 1 - x, y),
    }
}

fn rotate_planes(data: &[f32], planes: usize, h: usize, w: usize, deg: u32, nearest: bool) -> Vec<f32> {
    if deg % 90 == 0 && (h == w || deg % 180 == 0) {
        let mut out = vec![0.0f32; data.len()];
        let q = deg / 90;
        for p in 0..planes {
            let (src, dst) = (&data[p * h * w..(p + 1) * h * w], &mut out[p * h * w..(p + 1) * h * w]);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = quarter_turn(q, y, x, h, w);
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        return out;
    }
    rotate_sampled(data, planes, h, w, deg, nearest)
}

fn rotate_sampled(data: &[f32], planes: usize, h: usize, w: usize, deg: u32, nearest: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    let t = (deg as f64).to_radians();
    let (cos, sin) = (libm::cos(t), libm::sin(t));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            // inverse rotation of the output coordinate
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            for p in 0..planes {
                let src = &data[p * h * w..(p + 1) * h * w];
                let v = if nearest {
                    let (iy, ix) = (libm::round(sy), libm::round(sx));
                    if iy < 0.0 || ix < 0.0 || iy > (h - 1) as f64 || ix > (w - 1) as f64 {
                        0.0
                    } else {
                        src[iy as usize * w + ix as usize]
                    }
                } else {
                    bilinear_at(src, h, w, sy, sx)
                };
                out[p * h * w + y * w + x] = v;
            }
        }
    }
    out
}

/// Bilinear sample with zero outside the frame.
fn bilinear_at(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize] as f64
        }
    };
    let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx;
    v as f32
}

/// Rotates counter-clockwise about the image center (bilinear image,
/// nearest-neighbor mask, zero fill) then scales brightness with clamping.
pub fn augment(s: &Sample, rotation_deg: u32, brightness: f32) -> Result<Sample> {
    check_augment(rotation_deg, brightness)?;
    let (h, w) = (s.height(), s.width());
    let mut image = rotate_planes(s.image.data(), 3, h, w, rotation_deg, false);
    let mask = rotate_planes(s.mask.data(), 1, h, w, rotation_deg, true);
    if brightness != 1.0 {
        image.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    }
    let id = if rotation_deg == 0 && brightness == 1.0 {
        s.id.clone()
    } else {
        format!("{}_r{:03}_b{:03}", s.id, rotation_deg, libm::roundf(brightness * 100.0) as u32)
    };
    Sample::new(Tensor::new(&[3, h, w], image)?, Tensor::new(&[1, h, w], mask)?, id)
}

/// Every (rotation, brightness) combination of the augmentation grid.
pub fn augmentation_grid() -> Vec<(u32, f32)> {
    (0..360 / ROTATION_STEP)
        .flat_map(|k| BRIGHTNESS.iter().map(move |&b| (k * ROTATION_STEP, b)))
        .collect()
}

/// Expands each sample into the full grid of rotated and brightened
/// variants, the unaugmented original first.
pub fn expand(samples: &[Sample]) -> Result<Vec<Sample>> {
    let grid = augmentation_grid();
    let mut out = Vec::with_capacity(samples.len() * grid.len());
    for s in samples {
        for &(r, b) in &grid {
            out.push(augment(s, r, b)?);
        }
    }
    Ok(out)
}

/// One random grid variant per sample, drawn from `rng`.
pub fn augment_random<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Result<Sample> {
    let grid = augmentation_grid();
    let (r, b) = grid[rng.gen_range(0..grid.len())];
    augment(s, r, b)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub folds: Option<Vec<Vec<String>>>,
}

impl SplitPlan {
    /// Train/validation ids when fold `k` is held out.
    pub fn fold(&self, k: usize) -> Result<(Vec<String>, Vec<String>)> {
        let folds = self
            .folds
            .as_ref()
            .ok_or_else(|| Error::Usage("plan has no folds".into()))?;
        let val = folds
            .get(k)
            .ok_or_else(|| Error::Usage(format!("fold {} of {}", k, folds.len())))?
            .clone();
        let train = folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        Ok((train, val))
    }
}

fn shuffled(ids: &[String], seed: u64) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Err(Error::Usage("cannot partition an empty id list".into()));
    }
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(v)
}

/// Seeded shuffle, then the first `round(ratio·n)` ids train.
pub fn split(ids: &[String], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("split.ratio", format!("{} is outside (0, 1)", ratio)));
    }
    let mut v = shuffled(ids, seed)?;
    let n_train = libm::round(ratio * v.len() as f64) as usize;
    let val_ids = v.split_off(n_train.min(v.len()));
    Ok(SplitPlan {
        train_ids: v,
        val_ids,
        folds: None,
    })
}

/// Seeded shuffle into `k` contiguous folds whose sizes differ by at most
/// one (larger folds first). Train/validation hold out fold 0.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || k > ids.len() {
        return Err(Error::config(
            "kfold.k",
            format!("{} folds over {} ids (need 2 ≤ k ≤ n)", k, ids.len()),
        ));
    }
    let v = shuffled(ids, seed)?;
    let (base, extra) = (v.len() / k, v.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(v[start..start + len].to_vec());
        start += len;
    }
    let mut plan = SplitPlan {
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        folds: Some(folds),
    };
    let (train, val) = plan.fold(0)?;
    plan.train_ids = train;
    plan.val_ids = val;
    Ok(plan)
}

/// Samples whose ids appear in `ids`, in `ids` order.
pub fn select(samples: &[Sample], ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("unknown sample id `{}`", id)))
        })
        .collect()
}

pub fn ids(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.to_string()).collect()
}

/// Stacks samples into N×3×H×W images and N×1×H×W masks.
pub fn batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim(
                "batch",
                "H",
                format!("`{}` is {}×{}, batch is {}×{}", s.id, s.height(), s.width(), h, w),
            ));
        }
        images.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        masks.extend(s.mask.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let n = samples.len();
    Ok((Tensor::new(&[n, 3, h, w], images)?, Tensor::new(&[n, 1, h, w], masks)?))
}
