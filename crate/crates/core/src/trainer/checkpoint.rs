//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "CDCG"
//! version    u32
//! phase      u8       1 = alignment, 2 = conditional
//! step       u64
//! tensors    u32 count, then per entry:
//!              u32 name length, UTF-8 name,
//!              u32 rank, rank × u64 extents,
//!              product(extents) × f64 values
//! blobs      u32 count, then per entry:
//!              u32 name length, UTF-8 name, u64 length, raw bytes
//! config     u64 length, UTF-8 TOML snapshot
//! ```
//!
//! Tensor entries are the named parameters of every network. Optimizer
//! moments and RNG positions are stored as blobs (`adam.<net>`,
//! `rng.<stream>`), encoded with the same primitives.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::diffmath::{Module, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDCG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Align = 1,
    Cond = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub blobs: Vec<(String, Vec<u8>)>,
    pub config: String,
}

#[derive(Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    pub fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail(&self, what: &str) -> Error {
        Error::Checkpoint(format!("byte offset {}: {what}", self.pos))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(&format!("truncated, needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("name is not UTF-8"))
    }
    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.fail(&format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(self.fail(&format!("truncated tensor payload for shape {shape:?}")));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.phase as u8);
        w.u64(self.step);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.name(name);
            w.tensor(t);
        }
        w.u32(self.blobs.len() as u32);
        for (name, b) in &self.blobs {
            w.name(name);
            w.u64(b.len() as u64);
            w.bytes(b);
        }
        w.u64(self.config.len() as u64);
        w.bytes(self.config.as_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(
                "byte offset 0: bad magic, not a checkpoint".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let phase = match r.u8()? {
            1 => Phase::Align,
            2 => Phase::Cond,
            p => {
                return Err(Error::Checkpoint(format!(
                    "byte offset 8: unknown phase tag {p}"
                )))
            }
        };
        let step = r.u64()?;
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            tensors.push((r.name()?, r.tensor()?));
        }
        let n = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            let len = r.u64()? as usize;
            blobs.push((name, r.take(len)?.to_vec()));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        r.finish()?;
        Ok(Checkpoint {
            phase,
            step,
            tensors,
            blobs,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))
    }

    pub fn push_module<M: Module + ?Sized>(&mut self, module: &M) {
        for p in module.params() {
            self.tensors.push((p.name().to_string(), p.value.clone()));
        }
    }

    /// Overwrites every parameter of `module` from same-named entries.
    pub fn restore_module<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensor(p.name()) {
                Some(t) if t.shape() == p.shape() => p.value = t.clone(),
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                        p.name(),
                        t.shape(),
                        p.shape()
                    )))
                }
                None => {
                    err = Some(Error::Checkpoint(format!(
                        "missing parameter `{}`",
                        p.name()
                    )))
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn push_adam(&mut self, name: &str, s: &AdamState) {
        self.blobs.push((format!("adam.{name}"), encode_adam(s)));
    }

    pub fn adam(&self, name: &str) -> Result<AdamState> {
        decode_adam(self.blob(&format!("adam.{name}"))?)
    }

    pub fn push_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        self.blobs.push((format!("rng.{name}"), encode_rng(rng)));
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        decode_rng(self.blob(&format!("rng.{name}"))?)
    }
}

fn encode_adam(s: &AdamState) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(s.step);
    for v in [s.lr, s.beta1, s.beta2, s.eps] {
        w.f64(v);
    }
    w.u32(s.m.len() as u32);
    for (m, v) in s.m.iter().zip(&s.v) {
        w.tensor(m);
        w.tensor(v);
    }
    w.0
}

fn decode_adam(b: &[u8]) -> Result<AdamState> {
    let mut r = Reader::new(b);
    let step = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let n = r.u32()?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..n {
        m.push(r.tensor()?);
        v.push(r.tensor()?);
    }
    r.finish()?;
    Ok(AdamState {
        lr,
        beta1,
        beta2,
        eps,
        step,
        m,
        v,
    })
}

fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
    w.0
}

fn decode_rng(b: &[u8]) -> Result<ChaCha8Rng> {
    let mut r = Reader::new(b);
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let pos = r.u128()?;
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn bytes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(5);
        let _: u64 = rng.random();
        let mut ck = Checkpoint {
            phase: Phase::Cond,
            step: 42,
            tensors: vec![(
                "a.weight".into(),
                Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap(),
            )],
            blobs: vec![],
            config: "seed = 1\n".into(),
        };
        ck.push_rng("batch", &rng);
        let mut adam = AdamState::new(0.1);
        adam.m.push(Tensor::scalar(1.0));
        adam.v.push(Tensor::scalar(2.0));
        adam.step = 3;
        ck.push_adam("net", &adam);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"CDCG");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam("net").unwrap(), adam);
        let mut restored = back.rng("batch").unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let ck = Checkpoint {
            phase: Phase::Align,
            step: 0,
            tensors: vec![("x".into(), Tensor::scalar(1.0))],
            blobs: vec![],
            config: String::new(),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
