//! Named-tensor checkpoint container.
//!
//! Layout: `b"RGCK"`, `u32` version, then until EOF one record per tensor:
//! `u16` name length, UTF-8 name, `u8` rank, `u32` dims, `f64` payload.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RGCK";
const VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| ck(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| ck(format!("rank too large: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| ck(format!("dimension too large: {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let buf = write_checkpoint(tensors)?;
    fs::write(path, buf).map_err(|e| ck(format!("{}: {e}", path.display())))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ck(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ck("bad magic (expected RGCK)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| ck("tensor name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(n.checked_mul(8).ok_or_else(|| ck("payload too large"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
