//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MEPROPCK"
//! version  u32
//! width    u32      bytes per float (4 or 8)
//! count    u32
//! entries  count x { name_len u32, name utf-8, kind u8, payload }
//!   kind 0 tensor:  rank u32, dims rank x u64, floats
//!   kind 1 counter: u64
//!   kind 2 text:    len u64, utf-8
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MEPROPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry<T> {
    Tensor(Tensor<T>),
    Counter(u64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T> {
    entries: Vec<(String, Entry<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(String, Entry<T>)] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry<T>) {
        self.entries.push((name.into(), entry));
    }

    fn find(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        match self.find(name)? {
            Entry::Tensor(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not a tensor"))),
        }
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        match self.find(name)? {
            Entry::Counter(c) => Ok(*c),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not a counter"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.find(name)? {
            Entry::Text(s) => Ok(s),
            _ => Err(Error::Checkpoint(format!("entry {name:?} is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
                Entry::Counter(c) => {
                    out.push(1);
                    out.extend_from_slice(&c.to_le_bytes());
                }
                Entry::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-bit floats, expected {}-bit",
                width * 8,
                T::BYTES * 8
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let entry = match r.take(1)?[0] {
                0 => {
                    let rank = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank.min(16));
                    for _ in 0..rank {
                        shape.push(usize::try_from(r.u64()?).map_err(|_| {
                            Error::Checkpoint(format!("entry {name:?} has an oversized extent"))
                        })?);
                    }
                    let n = shape
                        .iter()
                        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                        .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} is too large")))?;
                    let raw = r.take(n.checked_mul(T::BYTES).ok_or_else(|| {
                        Error::Checkpoint(format!("entry {name:?} is too large"))
                    })?)?;
                    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
                    Entry::Tensor(Tensor::new(&shape, data)?)
                }
                1 => Entry::Counter(r.u64()?),
                2 => {
                    let len = usize::try_from(r.u64()?)
                        .map_err(|_| Error::Checkpoint("oversized text entry".into()))?;
                    let s = String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("entry {name:?} is not UTF-8")))?;
                    Entry::Text(s)
                }
                k => return Err(Error::Checkpoint(format!("entry {name:?} has unknown kind {k}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
