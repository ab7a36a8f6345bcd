//! CVOL binary volume format (little-endian):
//!
//! ```text
//! magic "CVOL" | version u32 = 1 | ndim u32 | dims u32 × ndim
//! | dtype u8 (0 = f32, 1 = f64) | 3 reserved zero bytes | row-major payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Array;

const MAGIC: &[u8; 4] = b"CVOL";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_cvol(a: &Array, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * a.ndim() + a.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0, 0]);
    match dtype {
        Dtype::F32 => a.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => a.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated {what}: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_cvol(buf: &[u8]) -> Result<Array> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"CVOL\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let ndim = r.u32("ndim")? as usize;
    if ndim > 16 {
        return Err(Error::format(8, format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("dims")? as usize);
    }
    let dtype_at = r.pos as u64;
    let dtype = match r.take(1, "dtype")?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        d => return Err(Error::format(dtype_at, format!("unknown dtype {d}"))),
    };
    if r.take(3, "reserved")? != [0, 0, 0] {
        return Err(Error::format(dtype_at + 1, "reserved bytes must be zero"));
    }
    let n: usize = shape.iter().product();
    let payload_at = r.pos;
    let bytes = r.take(n * dtype.width(), "payload").map_err(|_| {
        Error::format(
            buf.len() as u64,
            format!(
                "truncated payload: {:?} needs {} values, found {} bytes after offset {payload_at}",
                shape,
                n,
                buf.len() - payload_at
            ),
        )
    })?;
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after payload"));
    }
    let data = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Array::new(&shape, data)
}

pub fn write_volume(path: &Path, a: &Array) -> Result<()> {
    std::fs::write(path, encode_cvol(a, Dtype::F64)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Array> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cvol(&buf)
}
