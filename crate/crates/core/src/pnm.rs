//! Binary PPM (P6) and PGM (P5) images, maxval 255.
//!
//! Pixels map to [0,1] floats: byte/255 on read, round(v*255) clamped on
//! write. Headers accept arbitrary whitespace and `#` comments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fail(path: &Path, msg: impl Into<String>) -> Error {
    Error::ImageFormat {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Pull the next whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, usize)> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| fail(path, "empty file"))?;
    let mut dim = |name: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| fail(path, format!("bad or missing {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if width == 0 || height == 0 {
        return Err(fail(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(fail(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    Ok((magic, width, height, pos))
}

/// Read a P6 file into a [3,H,W] tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, width, height, offset) = parse_header(&bytes, path)?;
    if magic != "P6" {
        return Err(fail(path, format!("expected P6, found {magic}")));
    }
    let n = width * height;
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != 3 * n {
        return Err(fail(
            path,
            format!("payload holds {} bytes, need {}", payload.len(), 3 * n),
        ));
    }
    let mut data = vec![0.0f64; 3 * n];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        data[i] = px[0] as f64 / 255.0;
        data[n + i] = px[1] as f64 / 255.0;
        data[2 * n + i] = px[2] as f64 / 255.0;
    }
    Tensor::new(vec![3, height, width], data)
}

/// Read a P5 file into a [H,W] tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, width, height, offset) = parse_header(&bytes, path)?;
    if magic != "P5" {
        return Err(fail(path, format!("expected P5, found {magic}")));
    }
    let n = width * height;
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != n {
        return Err(fail(
            path,
            format!("payload holds {} bytes, need {n}", payload.len()),
        ));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![height, width], data)
}

/// Read either format as an RGB [3,H,W] tensor; P5 replicates the gray plane.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.first() {
        Some(b'P') if bytes.get(1) == Some(&b'6') => read_ppm(path),
        Some(b'P') if bytes.get(1) == Some(&b'5') => {
            let gray = read_pgm(path)?;
            let (h, w) = (gray.dim(0), gray.dim(1));
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(gray.data());
            }
            Tensor::new(vec![3, h, w], data)
        }
        _ => Err(fail(path, "not a P5/P6 file")),
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write a [3,H,W] tensor with components in [0,1] as P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.ndim() != 3 || image.dim(0) != 3 {
        return Err(Error::ShapeMismatch(format!(
            "write_ppm expects [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let n = h * w;
    let data = image.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * n);
    for i in 0..n {
        bytes.push(quantize(data[i]));
        bytes.push(quantize(data[n + i]));
        bytes.push(quantize(data[2 * n + i]));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a [H,W] tensor with components in [0,1] as P5.
pub fn write_pgm(path: &Path, gray: &Tensor) -> Result<()> {
    if gray.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "write_pgm expects [H,W], got {:?}",
            gray.shape()
        )));
    }
    let (h, w) = (gray.dim(0), gray.dim(1));
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(gray.iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
