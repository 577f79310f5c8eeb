//! Binary 8-bit grayscale PGM (P5) output.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Encodes row-major values in `[0, 1]` (clamped) as a P5 image.
pub fn encode(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dim("pgm", format!("{} values for {width}×{height}", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = encode(width, height, values)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Parses a P5 header written by [`encode`], returning `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |offset: usize, message: &str| Error::Format { offset, message: message.into() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad(0, "not a P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(0, "bad PGM header number"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h {
        return Err(bad(pos + 1, "pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}
