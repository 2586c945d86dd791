//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FAEW" | u16 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | f32 payload
//! u32 CRC-32 of every byte after the magic
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FAEW";
pub const VERSION: u16 = 1;

/// Serialises parameters (sorted by name) with an f32 payload.
pub fn write_checkpoint<T: Scalar>(params: &LayerParams<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::Usage("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, p) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Usage(format!("rank too large: {name}")))?;
        buf.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Usage(format!("extent too large: {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Every parameter comes back trainable.
pub fn read_checkpoint(bytes: &[u8]) -> Result<LayerParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic (expected \"FAEW\")".into() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    // The body must leave room for the trailing CRC.
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "truncated header".into() });
    }
    let body_end = bytes.len() - 4;
    let mut body = Reader { buf: &bytes[..body_end], pos: r.pos };
    let count = body.u32("tensor count")?;
    let mut params = LayerParams::new();
    for _ in 0..count {
        let name_at = body.pos;
        let len = body.u16("name length")? as usize;
        let name = std::str::from_utf8(body.take(len, "name")?)
            .map_err(|_| Error::Format { offset: name_at as u64 + 2, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = body.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(body.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = body.take(numel * 4, &format!("payload of '{name}'"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params
            .insert(name.clone(), Tensor::new(&shape, data)?, true)
            .map_err(|_| Error::Format { offset: name_at as u64, msg: format!("duplicate tensor '{name}'") })?;
    }
    if body.pos != body_end {
        return Err(Error::Format { offset: body.pos as u64, msg: "trailing bytes before checksum".into() });
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    if stored != actual {
        return Err(Error::Format {
            offset: body_end as u64,
            msg: format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        });
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &LayerParams<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LayerParams<f32>> {
    read_checkpoint(&std::fs::read(path)?)
}
