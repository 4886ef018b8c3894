//! Binary tensor files and 8-bit PGM/PPM images.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! "MLWT" | version: u8 = 1 | dtype: u8 (0 = f32, 1 = f64) | rank: u8
//! rank × u32 dims | row-major payload
//! ```
//!
//! Tensors of rank below four are read with leading unit axes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MLWT";
pub const TENSOR_VERSION: u8 = 1;

fn dtype_byte(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + t.len() * T::BYTES);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(dtype_byte(T::DTYPE));
    out.push(4);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Header of an encoded tensor: dtype, shape and payload offset.
pub fn peek_tensor_header(bytes: &[u8]) -> Result<(DType, Shape, usize)> {
    if bytes.len() < 7 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("missing MLWT magic".into()));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        b => return Err(Error::Format(format!("unknown dtype byte {b:#04x}"))),
    };
    let rank = bytes[6] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated tensor header".into()));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        dims[4 - rank + i] = d as usize;
    }
    Ok((dtype, Shape(dims), header))
}

/// Decodes a tensor, converting the stored dtype to `T` if needed.
pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, header) = peek_tensor_header(bytes)?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let payload = &bytes[header..];
    if payload.len() != shape.numel() * width {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match shape {shape} ({dtype:?})",
            payload.len()
        )));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Reads a binary PGM (P5, one channel) or PPM (P6, three channels) with
/// maxval ≤ 255 into a `(1, C, H, W)` tensor scaled to [0, 1].
pub fn decode_pnm<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PNM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::Format("truncated PNM raster".into()));
    }
    let raster = &bytes[start..start + len];
    let scale = 1.0 / maxval as f64;
    Ok(Tensor::from_fn(Shape::new(1, channels, height, width), |[_, c, y, x]| {
        T::of(raster[(y * width + x) * channels + c] as f64 * scale)
    }))
}

/// Encodes the first batch item of a 1- or 3-channel tensor as PGM/PPM,
/// clamping to [0, 1] and rounding to 8 bits.
pub fn encode_pnm<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape().0;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Format(format!("cannot write {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(t.at([0, ch, y, x]).f64()));
            }
        }
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_image<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_pnm(t)?)?;
    Ok(())
}

/// True when the path names a PGM/PPM file by extension.
pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// Duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
