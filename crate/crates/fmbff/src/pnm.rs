//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use fmbff_core::Tensor;

use crate::error::{Error, IoContext, Result};

/// Mask pixels strictly above this value read as foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// Decoded 8-bit raster, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.name, self.pos, detail)
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {}", what)));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<usize>().map_err(|_| Error::format(self.name, start, format!("{} `{}` out of range", what, text)))
    }
}

/// Parses a P5 or P6 file. `name` labels errors.
pub fn parse(bytes: &[u8], name: &str) -> Result<Raster> {
    let mut c = Cursor { bytes, pos: 0, name };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("missing P5/P6 magic")),
    };
    c.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(c.err("expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space_and_comments();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(name, maxval_at, format!("empty raster {}×{}", width, height)));
    }
    if maxval != 255 {
        return Err(Error::format(name, maxval_at, format!("maxval {} unsupported, expected 255", maxval)));
    }
    if !bytes.get(c.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(c.err("expected a single whitespace byte before pixel data"));
    }
    c.pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(Error::format(
            name,
            bytes.len(),
            format!("truncated pixel data: {} of {} bytes", have, need),
        ));
    }
    if have > need {
        return Err(Error::format(name, c.pos + need, format!("{} trailing bytes", have - need)));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: bytes[c.pos..].to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{}\n{} {}\n255\n", magic, r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

fn read_raster(path: &Path, channels: usize) -> Result<Raster> {
    let bytes = fs::read(path).at(path)?;
    let r = parse(&bytes, &path.display().to_string())?;
    if r.channels != channels {
        let want = if channels == 1 { "P5" } else { "P6" };
        return Err(Error::format(path.display().to_string(), 0, format!("expected {} data", want)));
    }
    Ok(r)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar C×H×W tensor in [0, 1] from an interleaved raster.
pub fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    let plane = r.width * r.height;
    let mut data = vec![0.0f32; plane * r.channels];
    for (i, px) in r.pixels.chunks(r.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[r.channels, r.height, r.width], data).expect("extent matches")
}

/// Interleaved raster from a C×H×W tensor, rounding to 8 bits.
pub fn tensor_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(Error::Validation(format!("cannot store a {:?} tensor as PGM/PPM", t.shape()))),
    };
    let plane = h * w;
    let d = t.data();
    let mut pixels = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            pixels.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: c,
        pixels,
    })
}

fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)).at(path)
}

/// 3×H×W image in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(raster_to_tensor(&read_raster(path, 3)?))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.dim(0) != 3 {
        return Err(Error::Validation(format!("image must have 3 channels, got {:?}", image.shape())));
    }
    write_raster(path, &tensor_to_raster(image)?)
}

/// 1×H×W binary mask; pixels above [`MASK_THRESHOLD`] are foreground.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let r = read_raster(path, 1)?;
    let data = r.pixels.iter().map(|&v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[1, r.height, r.width], data).expect("extent matches"))
}

/// Writes a 1×H×W tensor as 0/255 after thresholding at 0.5.
pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let bin = Tensor::new(
        mask.shape(),
        mask.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    )?;
    write_gray(path, &bin)
}

/// Writes a 1×H×W tensor in [0, 1] as 8-bit gray levels.
pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.dim(0) != 1 {
        return Err(Error::Validation(format!("gray map must have 1 channel, got {:?}", t.shape())));
    }
    write_raster(path, &tensor_to_raster(t)?)
}
