//! PNG and raw `SSDT` tensor files.
//!
//! Pixel bytes map to `[-1, 1]` via `v = 2 u / 255 - 1`. The raw format is
//! magic `SSDT`, `u16` version 1, `u8` ndim, ndim x `u32` dims and an `f32`
//! payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SsdError};
use crate::tensor::Tensor;

pub const RAW_MAGIC: [u8; 4] = *b"SSDT";
pub const RAW_VERSION: u16 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> SsdError {
    SsdError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn byte_to_value(u: u8) -> f64 {
    2.0 * (u as f64 / 255.0) - 1.0
}

pub fn value_to_byte(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    (255.0 * (c + 1.0) / 2.0).round() as u8
}

/// Reads an 8-bit grayscale or RGB PNG as a `[h, w, c]` tensor.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SsdError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("unsupported bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        data.extend(row[..w * channels].iter().map(|&u| byte_to_value(u)));
    }
    Tensor::new(vec![h, w, channels], data)
}

/// Writes a `[h, w, 1|3]` tensor as an 8-bit PNG, clamping to `[-1, 1]`.
pub fn save_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, color) = match *img.shape() {
        [h, w, 1] => (h, w, png::ColorType::Grayscale),
        [h, w, 3] => (h, w, png::ColorType::Rgb),
        _ => return Err(SsdError::invalid(format!("cannot save shape {:?} as PNG", img.shape()))),
    };
    if !img.is_finite() {
        return Err(SsdError::NonFinite("image to save"));
    }
    let file = File::create(path).map_err(|e| SsdError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| value_to_byte(v)).collect();
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

pub fn encode_raw(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(SsdError::invalid("too many dimensions for the raw format"));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| SsdError::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if r.len() < n {
            return Err(format_err(path, format!("truncated {what}")));
        }
        let (head, rest) = r.split_at(n);
        r = rest;
        Ok(head)
    };
    let magic = take(4, "magic")?;
    if magic != RAW_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:02x?}")));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != RAW_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let ndim = take(1, "rank")?[0] as usize;
    if ndim == 0 {
        return Err(format_err(path, "empty dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| format_err(path, format!("invalid dims {shape:?}")))?;
    let payload = take(
        n.checked_mul(4).ok_or_else(|| format_err(path, "payload too large"))?,
        "payload",
    )?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if !r.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", r.len())));
    }
    Tensor::new(shape, data)
}

pub fn save_raw(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raw(t)?;
    let mut f = File::create(path).map_err(|e| SsdError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SsdError::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SsdError::io(path, e))?;
    decode_raw(&bytes, path)
}
