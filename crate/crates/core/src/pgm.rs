//! Binary greyscale (P5) image export.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `values` (row-major) linearly mapped from `[min, max]` to `[0, 255]`.
/// A constant plane is written as uniform mid-grey.
pub fn write_scaled(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "pixel count must match dimensions");
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if !(span > 1e-300) {
                128
            } else {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    write_raw(path, width, height, &pixels)
}

pub fn write_raw(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    file.flush()?;
    Ok(())
}

/// Reads a P5 file written by [`write_raw`]; returns `(width, height, pixels)`.
pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
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
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a P5 file: {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok((w, h, data.to_vec()))
}
