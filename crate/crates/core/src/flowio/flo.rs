use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";
// Guard against absurd headers before allocating.
const MAX_DIM: i32 = 1 << 15;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(buf: &[u8]) -> Result<FlowField> {
    if buf.len() < 4 {
        return Err(Error::format("flo", buf.len() as u64, "truncated magic"));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::format("flo", 0, "bad magic, expected PIEH"));
    }
    if buf.len() < 12 {
        return Err(Error::format("flo", buf.len() as u64, "truncated header"));
    }
    let width = i32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    let height = i32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if !(1..=MAX_DIM).contains(&width) {
        return Err(Error::format("flo", 4, format!("invalid width {width}")));
    }
    if !(1..=MAX_DIM).contains(&height) {
        return Err(Error::format("flo", 8, format!("invalid height {height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let need = 12 + w * h * 8;
    if buf.len() < need {
        return Err(Error::format(
            "flo",
            buf.len() as u64,
            format!("truncated data, expected {need} bytes"),
        ));
    }
    if buf.len() > need {
        return Err(Error::format("flo", need as u64, "trailing bytes"));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FlowField::new(w, h, data)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&buf)
}
