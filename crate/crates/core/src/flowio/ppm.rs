use std::path::Path;

use super::{Mask, RgbImage};
use crate::error::{Error, Result};

const MAX_DIM: usize = 1 << 15;

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses a binary P6 file with maxval 255. Header comments are allowed.
pub fn decode_ppm(buf: &[u8]) -> Result<RgbImage> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(Error::format("ppm", 0, "bad magic, expected P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", pos as u64, format!("expected header field {i}")));
        }
        let text = std::str::from_utf8(&buf[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format("ppm", start as u64, "header number out of range"))?;
    }
    match buf.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("ppm", pos as u64, "missing whitespace after header")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(Error::format("ppm", 2, format!("invalid size {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::format("ppm", 2, format!("unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    let body = &buf[pos..];
    if body.len() < need {
        return Err(Error::format(
            "ppm",
            buf.len() as u64,
            format!("truncated pixel data, expected {need} bytes"),
        ));
    }
    if body.len() > need {
        return Err(Error::format("ppm", (pos + need) as u64, "trailing bytes"));
    }
    RgbImage::new(w, h, body.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&buf)
}

/// Writes a mask as a P6 image with 0 / 255 gray levels.
pub fn write_mask_ppm(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask
        .data
        .iter()
        .flat_map(|&m| {
            let v = if m != 0 { 255 } else { 0 };
            [v, v, v]
        })
        .collect();
    write_ppm(path, &RgbImage::new(mask.width, mask.height, data)?)
}

pub fn read_mask_ppm(path: &Path) -> Result<Mask> {
    let img = read_ppm(path)?;
    let mut data = Vec::with_capacity(img.width * img.height);
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        match px {
            [0, 0, 0] => data.push(0),
            [255, 255, 255] => data.push(1),
            _ => {
                return Err(Error::Invalid(format!(
                    "{}: mask pixel {i} is not 0 or 255",
                    path.display()
                )))
            }
        }
    }
    Mask::new(img.width, img.height, data)
}
