//! `MODW` parameter files.
//!
//! Layout (all integers u32 little-endian):
//! magic `MODW`, version, array count, then per array: name length, UTF-8
//! name, rank, dims, and `prod(dims)` little-endian f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MODW";
pub const VERSION: u32 = 1;

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(arrays.len(), "array count")?.to_le_bytes());
    for a in arrays {
        let numel: usize = a.dims.iter().product();
        if numel != a.data.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("{}: dims {:?} vs {} values", a.name, a.dims, a.data.len()),
            ));
        }
        out.extend_from_slice(&u32_of(a.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&u32_of(a.dims.len(), "rank")?.to_le_bytes());
        for &d in &a.dims {
            out.extend_from_slice(&u32_of(d, "dim")?.to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedArray>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", 0, "bad magic, expected MODW"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = cur.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_at = cur.pos;
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format("checkpoint", name_at as u64, "name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = cur.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format("checkpoint", cur.pos as u64, "element count overflows"))?;
            dims.push(d);
        }
        let bytes_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format("checkpoint", cur.pos as u64, "element count overflows"))?;
        let raw = cur.take(bytes_len, "array data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    if cur.pos != buf.len() {
        return Err(Error::format(
            "checkpoint",
            cur.pos as u64,
            format!("{} trailing bytes", buf.len() - cur.pos),
        ));
    }
    Ok(arrays)
}

pub fn save(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(arrays)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedArray>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedArray> {
        vec![
            NamedArray {
                name: "enc.w".into(),
                dims: vec![2, 3],
                data: vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0],
            },
            NamedArray {
                name: "bias".into(),
                dims: vec![1],
                data: vec![7.0],
            },
        ]
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"MODW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(&bytes[16..21], b"enc.w");
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 2);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = encode(&a).unwrap();
        let b = decode(&bytes).unwrap();
        assert_eq!(encode(&b).unwrap(), bytes);
        assert_eq!(b[0].data[5].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut bytes = encode(&sample()).unwrap();
        let good = bytes.clone();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        for cut in [0, 3, 11, 20, good.len() - 1] {
            assert!(decode(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
