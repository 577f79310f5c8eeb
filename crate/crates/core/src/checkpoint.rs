//! `MTLW` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTLW" | version u32 | entry count u32 | entries...
//! entry = name_len u16 | UTF-8 name | rank u8 | extents (u32 × rank) | f32 data
//! ```
//!
//! The entry count covers every entry. Model tensors come first; optimizer
//! state follows under names prefixed [`OPT_PREFIX`].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MTLW";
pub const VERSION: u32 = 1;
pub const OPT_PREFIX: &str = "opt/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.push((name.into(), tensor.cast()));
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries not belonging to optimizer state.
    pub fn model_entries(&self) -> impl Iterator<Item = &(String, Tensor<f32>)> {
        self.entries.iter().filter(|(n, _)| !n.starts_with(OPT_PREFIX))
    }

    /// Optimizer entries with the prefix stripped.
    pub fn optimizer_entries(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().filter_map(|(n, t)| n.strip_prefix(OPT_PREFIX).map(|s| (s, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut model: Vec<_> = self.model_entries().collect();
        let opt: Vec<_> = self.entries.iter().filter(|(n, _)| n.starts_with(OPT_PREFIX)).collect();
        model.extend(opt);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(model.len() as u32).to_le_bytes());
        for (name, t) in model {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("extent too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at, message: "entry name is not UTF-8".into() })?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let at = r.offset();
            let data = r.f32s(numel(&shape))?;
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
            entries.push((name, t));
        }
        if !r.is_done() {
            return Err(r.error("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Little-endian cursor that reports failures with their byte offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn error(&self, message: String) -> Error {
        Error::Format { offset: self.pos, message }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!("unexpected end of data: need {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
