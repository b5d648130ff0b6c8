//! Flat binary weight files.
//!
//! Layout, little-endian: `b"SPNN"`, `u32` version, `u32` metadata length,
//! UTF-8 metadata, `u32` tensor count, then per tensor `u32` name length,
//! UTF-8 name, `u32` rank, `u64` dims, and the row-major `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `meta` is free-form text stored in the header.
pub fn write_checkpoint(w: &mut impl Write, meta: &str, tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_string(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Returns the header metadata and the tensors.
pub fn read_checkpoint(r: &mut impl Read, path: &str) -> Result<(String, Vec<Tensor>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |detail: String| Error::Format {
        path: path.to_string(),
        detail,
    };
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if c.take(4)? != MAGIC {
        return Err(bad("not a weight file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = String::from_utf8(c.take(meta_len)?.to_vec()).map_err(|_| bad("metadata is not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(Tensor { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok((meta, out))
}

pub fn save_tensors(path: &Path, meta: &str, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, meta, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<(String, Vec<Tensor>)> {
    let mut f = fs::File::open(path)?;
    read_checkpoint(&mut f, &path.display().to_string())
}
