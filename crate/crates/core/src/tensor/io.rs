//! On-disk tensor format, little-endian throughout:
//!
//! ```text
//! "LGUT" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64) | ndim u8 | ndim × u64 extents | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LGUT";
const VERSION: u8 = 1;

pub fn write_tensor(t: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "more than 255 dimensions")
    })?;
    let mut buf = Vec::with_capacity(7 + 8 * t.ndim() + t.numel() * t.dtype().size_bytes());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.dtype().code());
    buf.push(ndim);
    for &extent in t.shape() {
        buf.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(t, &mut file).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a complete tensor file image.
pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"LGUT\""),
        });
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let code = cur.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
        offset: 5,
        reason: format!("unknown dtype byte {code}"),
    })?;
    let ndim = cur.u8("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = cur.pos as u64;
        let raw = u64::from_le_bytes(cur.take(8, "extent")?.try_into().unwrap());
        let extent = usize::try_from(raw).map_err(|_| Error::Format {
            offset: at,
            reason: format!("extent {raw} does not fit in memory"),
        })?;
        shape.push(extent);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format {
            offset: 7,
            reason: format!("element count of {shape:?} overflows"),
        })?;
    let payload_bytes = numel
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| Error::Format {
            offset: cur.pos as u64,
            reason: "payload size overflows".into(),
        })?;
    let payload = cur.take(payload_bytes, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::from_parts(dtype, shape, data))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&bytes)
}
