//! PNG helpers for display images and a lossless float-map container.
//!
//! The float container (`.dmap`) holds `C×H×W` little-endian `f32` values
//! behind a small header, zlib-compressed:
//!
//! ```text
//! b"DMAP" | version: u8 | channels: u32 | height: u32 | width: u32 | zlib(f32 LE …)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::physics::ImageTensor;
use crate::tensor::Tensor;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u8 = 1;
const DMAP_HEADER: usize = 4 + 1 + 12;

/// Rounds `[0, 1]` to the nearest 8-bit level.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every value to the 8-bit grid so a PNG round trip is exact.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(to_u8(v)) / 255.0)
}

/// Encodes channel 0..3 of a `[1,3,H,W]` or channel 0 of a `[1,1,H,W]` tensor as PNG bytes.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape();
    let (wu, hu) = (w as u32, h as u32);
    let mut bytes = Vec::new();
    let mut cursor = std::io::Cursor::new(&mut bytes);
    match c {
        1 => {
            let buf = ImageBuffer::<Luma<u8>, _>::from_fn(wu, hu, |x, y| {
                Luma([to_u8(t.get(0, 0, y as usize, x as usize))])
            });
            buf.write_to(&mut cursor, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(wu, hu, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([to_u8(t.get(0, 0, y, x)), to_u8(t.get(0, 1, y, x)), to_u8(t.get(0, 2, y, x))])
            });
            buf.write_to(&mut cursor, image::ImageFormat::Png)?;
        }
        _ => return Err(Error::InvalidArgument(format!("cannot encode {c} channels as PNG"))),
    }
    Ok(bytes)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<Vec<u8>> {
    let bytes = encode_png(t)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Reads any 8/16-bit PNG as RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let t = Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 65535.0
    });
    ImageTensor::from_clamped(t)
}

/// Reads a PNG as a single luminance channel in `[0, 1]` (16-bit precision preserved).
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 1, h as usize, w as usize], |_, _, y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 65535.0
    }))
}

pub fn encode_dmap(t: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n != 1 {
        return Err(Error::InvalidArgument("float maps hold a single item".into()));
    }
    let mut out = Vec::with_capacity(DMAP_HEADER + t.numel());
    out.extend_from_slice(DMAP_MAGIC);
    out.push(DMAP_VERSION);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut enc = ZlibEncoder::new(out, Compression::default());
    for &v in t.data() {
        enc.write_all(&(v as f32).to_le_bytes()).expect("in-memory write");
    }
    Ok(enc.finish().expect("in-memory write"))
}

pub fn decode_dmap(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < DMAP_HEADER || &bytes[..4] != DMAP_MAGIC {
        return Err(Error::Data("not a float map (bad magic)".into()));
    }
    if bytes[4] != DMAP_VERSION {
        return Err(Error::Data(format!("unsupported float map version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Data("float map dimensions overflow".into()))?;
    let mut raw = Vec::with_capacity(count * 4);
    ZlibDecoder::new(&bytes[DMAP_HEADER..])
        .take(count as u64 * 4 + 1)
        .read_to_end(&mut raw)
        .map_err(|e| Error::Data(format!("corrupt float map payload: {e}")))?;
    if raw.len() != count * 4 {
        return Err(Error::Data(format!(
            "float map payload has {} bytes, expected {}",
            raw.len(),
            count * 4
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Tensor::from_vec([1, c, h, w], data)
}

pub fn write_dmap(path: &Path, t: &Tensor) -> Result<Vec<u8>> {
    let bytes = encode_dmap(t)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read_dmap(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dmap(&bytes)
}

/// Rounds every value through `f32`, matching what a float map stores.
pub fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}
