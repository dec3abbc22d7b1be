//! Binary PPM (P6) image and PGM (P5) mask files, 8-bit, dependency-free.
//!
//! Images are [3,H,W] tensors in [0,1] quantized to bytes; masks store the
//! class id per pixel with 255 as the ignore marker.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Tensor};
use crate::types::LabelMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!("image must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{w} {h}\n255\n")?;
    let v = image.values();
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                row.push(quantize(v[idx3(c, y, x, h, w)]));
            }
        }
        file.write_all(&row)?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut reader, "P6")?;
    let mut raw = vec![0u8; 3 * w * h];
    reader.read_exact(&mut raw).map_err(|_| Error::MalformedHeader {
        format: "PPM",
        reason: "truncated pixel data".into(),
    })?;
    let mut values = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                values[idx3(c, y, x, h, w)] = raw[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], values)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(labels.classes())?;
    file.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut reader, "P5")?;
    let mut raw = vec![0u8; w * h];
    reader.read_exact(&mut raw).map_err(|_| Error::MalformedHeader {
        format: "PGM",
        reason: "truncated pixel data".into(),
    })?;
    LabelMap::new(h, w, raw, num_classes)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses "<magic> <width> <height> <maxval>" with '#' comments, leaving the
/// reader at the first raster byte.
fn read_header<R: BufRead>(reader: &mut R, magic: &'static str) -> Result<(usize, usize)> {
    let format: &'static str = if magic == "P6" { "PPM" } else { "PGM" };
    let bad = |reason: String| Error::MalformedHeader { format, reason };

    let mut m = [0u8; 2];
    reader.read_exact(&mut m).map_err(|_| bad("missing magic".into()))?;
    if m != magic.as_bytes()[..2] {
        return Err(bad(format!("expected {magic}, found {:?}", String::from_utf8_lossy(&m))));
    }
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = read_header_int(reader, format)?;
    }
    if fields[2] != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {}", fields[2])));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(bad("zero image dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the raster;
    // read_header_int has already consumed it.
    Ok((fields[0], fields[1]))
}

fn read_header_int<R: BufRead>(reader: &mut R, format: &'static str) -> Result<usize> {
    let bad = |reason: String| Error::MalformedHeader { format, reason };
    let mut byte = [0u8; 1];
    // Skip whitespace and comment lines.
    loop {
        reader.read_exact(&mut byte).map_err(|_| bad("unexpected end of header".into()))?;
        if byte[0] == b'#' {
            let mut line = String::new();
            reader.read_line(&mut line)?;
        } else if !byte[0].is_ascii_whitespace() {
            break;
        }
    }
    let mut digits = Vec::new();
    while byte[0].is_ascii_digit() {
        digits.push(byte[0]);
        reader.read_exact(&mut byte).map_err(|_| bad("unexpected end of header".into()))?;
    }
    if digits.is_empty() || !byte[0].is_ascii_whitespace() {
        return Err(bad(format!("expected integer, found byte {}", byte[0])));
    }
    std::str::from_utf8(&digits)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("unparsable integer".into()))
}
