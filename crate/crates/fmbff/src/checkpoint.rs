//! Binary checkpoints.
//!
//! Layout (little-endian): magic `FMBF`, u16 version, u32 entry count, then
//! per entry a u16 name length, the UTF-8 name, a u8 dtype tag (0 = f32,
//! 1 = f64), a u8 rank, u32 dims and the payload; a CRC32 of every
//! preceding byte closes the file.
//!
//! Entry names carry a kind prefix: `param:`, `buffer:`, `adam.m:`,
//! `adam.v:`, `state:` and `config:`.

use std::fs;
use std::path::Path;

use fmbff_core::model::{Model, ModelConfig, SkipMode};
use fmbff_core::nn::{BiffmConfig, FmcabConfig, VitmConfig};
use fmbff_core::params::{Buffers, ParamStore};
use fmbff_core::tensor::ops::RunningStats;
use fmbff_core::train::{Adam, AdamConfig, Plateau, TrainState};
use fmbff_core::{DType, Scalar, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"FMBF";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn of<T: Scalar>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(v.iter().map(|x| x.to_f64() as f32).collect()),
            DType::F64 => Payload::F64(v.iter().map(|x| x.to_f64()).collect()),
        }
    }

    fn cast<T: Scalar>(&self) -> Vec<T> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: &[usize], payload: Payload) -> Self {
        Entry {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            payload,
        }
    }

    pub fn scalars(name: impl Into<String>, v: &[f64]) -> Self {
        Entry::new(name, &[v.len()], Payload::F64(v.to_vec()))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.payload.dtype().tag());
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.name,
                self.pos,
                format!("truncated: {} needs {} bytes, {} remain", what, n, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses and checksums a checkpoint image. `name` labels errors.
pub fn decode(bytes: &[u8], name: &str) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0, name };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(name, 0, "bad magic, not a checkpoint"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(name, 4, format!("unsupported version {} (expected {})", version, VERSION)));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let raw = r.take(len, "name")?;
        let ename = std::str::from_utf8(raw)
            .map_err(|_| Error::format(name, at + 2, "entry name is not UTF-8"))?
            .to_string();
        let tag_at = r.pos;
        let dtype = DType::from_tag(r.u8("dtype")?)
            .ok_or_else(|| Error::format(name, tag_at, format!("unknown dtype tag in `{}`", ename)))?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::format(name, tag_at, format!("`{}` has an overflowing extent", ename)))?;
        let nbytes = n
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::format(name, tag_at, format!("`{}` has an overflowing extent", ename)))?;
        let raw = r.take(nbytes, "payload")?;
        let payload = match dtype {
            DType::F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        };
        entries.push(Entry {
            name: ename,
            dims,
            payload,
        });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::format(name, r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(
            name,
            body_end,
            format!("checksum mismatch: stored {:08x}, computed {:08x}", stored, actual),
        ));
    }
    Ok(entries)
}

/// Everything needed to rebuild a model and resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub state: Option<TrainState<T>>,
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(v: &[f64]) -> u64 {
    (v[0] as u64) | ((v[1] as u64) << 32)
}

fn config_entries(c: &ModelConfig) -> Vec<Entry> {
    let us = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    vec![
        Entry::scalars("config:model.in_channels", &[c.in_channels as f64]),
        Entry::scalars("config:model.input_size", &us(&[c.input_size.0, c.input_size.1])),
        Entry::scalars("config:model.encoder_widths", &us(&c.encoder_widths)),
        Entry::scalars("config:model.decoder_widths", &us(&c.decoder_widths)),
        Entry::scalars("config:model.vitm.heads", &[c.vitm.heads as f64]),
        Entry::scalars("config:model.fmcab.reduction", &[c.fmcab.reduction as f64]),
        Entry::scalars("config:model.fmcab.p_exponent", &[c.fmcab.p_exponent]),
        Entry::scalars("config:model.biffm.shuffle_groups", &[c.biffm.shuffle_groups as f64]),
        Entry::scalars(
            "config:model.skip_mode",
            &[match c.skip_mode {
                SkipMode::LiteralS4 => 0.0,
                SkipMode::StageMatched => 1.0,
            }],
        ),
        Entry::scalars("config:model.seed", &split_u64(c.seed)),
    ]
}

fn state_entries<T: Scalar>(params: &ParamStore<T>, s: &TrainState<T>) -> Vec<Entry> {
    let p = &s.schedule;
    let mut out = vec![
        Entry::scalars("state:epoch", &[s.epoch as f64]),
        Entry::scalars("state:step", &[s.step as f64]),
        Entry::scalars("state:adam.t", &split_u64(s.adam.t)),
        Entry::scalars(
            "state:adam.hyper",
            &[s.adam.config.beta1, s.adam.config.beta2, s.adam.config.eps],
        ),
        Entry::scalars("state:schedule.lr0", &[p.lr0]),
        Entry::scalars("state:schedule.factor", &[p.factor]),
        Entry::scalars(
            "state:schedule.counters",
            &[
                p.patience as f64,
                p.stop_patience as f64,
                p.plateau_count as f64,
                p.epochs_since_best as f64,
                p.reductions as f64,
            ],
        ),
    ];
    if let Some(b) = p.best {
        out.push(Entry::scalars("state:schedule.best", &[b]));
    }
    let seed = s.rng.get_seed();
    let seed_words: Vec<f64> = seed
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4")) as f64)
        .collect();
    out.push(Entry::scalars("state:rng.seed", &seed_words));
    out.push(Entry::scalars("state:rng.stream", &split_u64(s.rng.get_stream())));
    let pos = s.rng.get_word_pos();
    let pos_words: Vec<f64> = (0..4).map(|k| ((pos >> (32 * k)) & 0xffff_ffff) as f64).collect();
    out.push(Entry::scalars("state:rng.word_pos", &pos_words));
    for ((_, name, t), (m, v)) in params.iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
        out.push(Entry::new(format!("adam.m:{}", name), t.shape(), Payload::of(m)));
        out.push(Entry::new(format!("adam.v:{}", name), t.shape(), Payload::of(v)));
    }
    out
}

pub fn to_entries<T: Scalar>(ck: &Checkpoint<T>) -> Vec<Entry> {
    let mut out = config_entries(&ck.model);
    for (_, name, t) in ck.params.iter() {
        out.push(Entry::new(format!("param:{}", name), t.shape(), Payload::of(t.data())));
    }
    for (name, s) in ck.buffers.iter() {
        out.push(Entry::new(format!("buffer:{}.mean", name), &[s.mean.len()], Payload::of(&s.mean)));
        out.push(Entry::new(format!("buffer:{}.var", name), &[s.var.len()], Payload::of(&s.var)));
        out.push(Entry::new(format!("buffer:{}.momentum", name), &[1], Payload::of(&[s.momentum])));
    }
    if let Some(s) = &ck.state {
        out.extend(state_entries(&ck.params, s));
    }
    out
}

struct Lookup<'a> {
    entries: std::collections::HashMap<&'a str, &'a Entry>,
    used: std::collections::HashSet<&'a str>,
    file: &'a str,
}

impl<'a> Lookup<'a> {
    fn get(&mut self, key: &str) -> Result<&'a Entry> {
        let (k, e) = self
            .entries
            .get_key_value(key)
            .ok_or_else(|| Error::format(self.file, 0, format!("missing entry `{}`", key)))?;
        self.used.insert(k);
        Ok(e)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn values(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let e = self.get(key)?;
        if e.payload.len() != len {
            return Err(Error::format(
                self.file,
                0,
                format!("`{}` holds {} values, expected {}", key, e.payload.len(), len),
            ));
        }
        Ok(e.payload.to_f64())
    }

    fn one(&mut self, key: &str) -> Result<f64> {
        Ok(self.values(key, 1)?[0])
    }

    fn tensor<T: Scalar>(&mut self, key: &str, shape: &[usize]) -> Result<Vec<T>> {
        let e = self.get(key)?;
        if e.shape() != shape {
            return Err(Error::format(
                self.file,
                0,
                format!("`{}` has shape {:?}, model expects {:?}", key, e.shape(), shape),
            ));
        }
        Ok(e.payload.cast())
    }
}

fn model_config(l: &mut Lookup<'_>) -> Result<ModelConfig> {
    let w4 = |v: Vec<f64>| [v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize];
    let size = l.values("config:model.input_size", 2)?;
    Ok(ModelConfig {
        in_channels: l.one("config:model.in_channels")? as usize,
        input_size: (size[0] as usize, size[1] as usize),
        encoder_widths: w4(l.values("config:model.encoder_widths", 4)?),
        decoder_widths: w4(l.values("config:model.decoder_widths", 4)?),
        vitm: VitmConfig {
            heads: l.one("config:model.vitm.heads")? as usize,
        },
        fmcab: FmcabConfig {
            reduction: l.one("config:model.fmcab.reduction")? as usize,
            p_exponent: l.one("config:model.fmcab.p_exponent")?,
        },
        biffm: BiffmConfig {
            shuffle_groups: l.one("config:model.biffm.shuffle_groups")? as usize,
        },
        skip_mode: if l.one("config:model.skip_mode")? == 0.0 {
            SkipMode::LiteralS4
        } else {
            SkipMode::StageMatched
        },
        seed: join_u64(&l.values("config:model.seed", 2)?),
    })
}

fn train_state<T: Scalar>(l: &mut Lookup<'_>, params: &ParamStore<T>) -> Result<TrainState<T>> {
    let hyper = l.values("state:adam.hyper", 3)?;
    let counters = l.values("state:schedule.counters", 5)?;
    let schedule = Plateau {
        lr0: l.one("state:schedule.lr0")?,
        factor: l.one("state:schedule.factor")?,
        patience: counters[0] as usize,
        stop_patience: counters[1] as usize,
        best: if l.has("state:schedule.best") {
            Some(l.one("state:schedule.best")?)
        } else {
            None
        },
        plateau_count: counters[2] as usize,
        epochs_since_best: counters[3] as usize,
        reductions: counters[4] as u32,
    };
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        m.push(l.tensor::<T>(&format!("adam.m:{}", name), t.shape())?);
        v.push(l.tensor::<T>(&format!("adam.v:{}", name), t.shape())?);
    }
    let words = l.values("state:rng.seed", 8)?;
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_mut(4).zip(&words) {
        chunk.copy_from_slice(&(*w as u32).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(join_u64(&l.values("state:rng.stream", 2)?));
    let pos = l
        .values("state:rng.word_pos", 4)?
        .iter()
        .enumerate()
        .fold(0u128, |acc, (k, &w)| acc | ((w as u128) << (32 * k)));
    rng.set_word_pos(pos);
    Ok(TrainState {
        epoch: l.one("state:epoch")? as usize,
        step: l.one("state:step")? as usize,
        schedule,
        adam: Adam {
            config: AdamConfig {
                beta1: hyper[0],
                beta2: hyper[1],
                eps: hyper[2],
            },
            m,
            v,
            t: join_u64(&l.values("state:adam.t", 2)?),
        },
        rng,
    })
}

/// Rebuilds the model named by the checkpoint's configuration entries and
/// fills in its values. Every entry must be consumed.
pub fn from_entries<T: Scalar>(entries: &[Entry], file: &str) -> Result<(Model, Checkpoint<T>)> {
    let mut l = Lookup {
        entries: entries.iter().map(|e| (e.name.as_str(), e)).collect(),
        used: Default::default(),
        file,
    };
    if l.entries.len() != entries.len() {
        return Err(Error::format(file, 0, "duplicate entry names"));
    }
    let config = model_config(&mut l)?;
    let (model, mut params, mut buffers) = Model::build::<T>(&config)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let shape = params.get(id).shape().to_vec();
        let data = l.tensor::<T>(&format!("param:{}", name), &shape)?;
        params.set(id, &Tensor::param(&shape, data)?)?;
    }
    let names: Vec<(String, usize)> = buffers.iter().map(|(n, s)| (n.to_string(), s.mean.len())).collect();
    for (name, c) in names {
        let stats = RunningStats {
            mean: l.tensor::<T>(&format!("buffer:{}.mean", name), &[c])?,
            var: l.tensor::<T>(&format!("buffer:{}.var", name), &[c])?,
            momentum: l.tensor::<T>(&format!("buffer:{}.momentum", name), &[1])?[0],
        };
        *buffers.by_name_mut(&name).expect("listed buffer") = stats;
    }
    let state = if l.has("state:epoch") {
        Some(train_state(&mut l, &params)?)
    } else {
        None
    };
    if let Some(extra) = entries.iter().find(|e| !l.used.contains(e.name.as_str())) {
        return Err(Error::format(file, 0, format!("unexpected entry `{}`", extra.name)));
    }
    Ok((
        model,
        Checkpoint {
            model: config,
            params,
            buffers,
            state,
        },
    ))
}

pub fn save<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let bytes = encode(&to_entries(ck));
    fs::write(path, &bytes).at(path)?;
    Ok(bytes)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model, Checkpoint<T>)> {
    let bytes = fs::read(path).at(path)?;
    let name = path.display().to_string();
    from_entries(&decode(&bytes, &name)?, &name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors() {
        let good = encode(&[Entry::scalars("state:x", &[1.0, 2.0])]);
        assert_eq!(decode(&good, "t").unwrap()[0].payload, Payload::F64(vec![1.0, 2.0]));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, "t"), Err(Error::Format { offset: 0, .. })));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2, "t"), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 9];
        assert!(matches!(decode(cut, "t"), Err(Error::Format { .. })));
        let mut flipped = good.clone();
        let n = flipped.len();
        flipped[n - 5] ^= 1;
        let e = decode(&flipped, "t").unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");
    }
}
