//! Raster files.
//!
//! Float rasters (semantic maps, range images) use a small planar format:
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"EMBR"
//! 4       4     width     u32 LE
//! 8       4     height    u32 LE
//! 12      4     channels  u32 LE
//! 16      4·WHC samples, f32 LE, channel-major (all of channel 0, then 1, ...)
//! ```
//!
//! RGB images are 8-bit PNG and masks are 8-bit grayscale PNG (nonzero = set).

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};

pub const RASTER_MAGIC: [u8; 4] = *b"EMBR";
pub const RASTER_HEADER_BYTES: usize = 16;

/// Encodes an image as a float raster. Samples are stored as f32.
pub fn encode_float_raster(image: &Image) -> Vec<u8> {
    let (w, h, c) = (image.width, image.height, image.channels);
    let mut out = Vec::with_capacity(RASTER_HEADER_BYTES + 4 * w * h * c);
    out.extend_from_slice(&RASTER_MAGIC);
    for d in [w, h, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for k in 0..c {
        for p in 0..w * h {
            out.extend_from_slice(&(image.data[p * c + k] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_float_raster(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RASTER_HEADER_BYTES || bytes[..4] != RASTER_MAGIC {
        return Err(Error::BadRasterHeader);
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(4), dim(8), dim(12));
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::BadRasterHeader)?;
    if bytes.len() - RASTER_HEADER_BYTES != expected {
        return Err(Error::BadRasterHeader);
    }
    let body = &bytes[RASTER_HEADER_BYTES..];
    let mut data = vec![0.0; w * h * c];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (k, p) = (i / (w * h), i % (w * h));
        data[p * c + k] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    Image::from_vec(w, h, c, data)
}

pub fn write_float_raster(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_float_raster(image))?;
    Ok(())
}

pub fn read_float_raster(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    decode_float_raster(&bytes)
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel image with values in [0, 1] as 8-bit PNG.
pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::DimensionMismatch {
            context: "rgb png",
            expected: 3,
            got: image.channels,
        });
    }
    let buf: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, buf).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}

/// Reads an 8-bit image as RGB with values `byte / 255`.
pub fn read_rgb_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Writes a single-channel image with values in [0, 1] as 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::DimensionMismatch {
            context: "gray png",
            expected: 1,
            got: image.channels,
        });
    }
    let buf: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(image.width as u32, image.height as u32, buf).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, buf).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|b| b != 0).collect(),
    })
}
