//! Image and depth-map encodings.
//!
//! Depth sidecar layout (little-endian): magic `b"BFDEPTH\0"`, `u32` width,
//! `u32` height, then `width * height` row-major `f32` values.

use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use thiserror::Error;

use crate::raster::{Image, Resolution, ScalarMap};

pub const DEPTH_MAGIC: &[u8; 8] = b"BFDEPTH\0";

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("depth sidecar: {0}")]
    Depth(String),
}

/// Quantizes a `[0, 1]` value to 8 bits with rounding.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encoder(out: &mut Vec<u8>) -> PngEncoder<&mut Vec<u8>> {
    PngEncoder::new_with_quality(out, CompressionType::Default, FilterType::Adaptive)
}

/// 8-bit RGB PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageIoError> {
    let bytes: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(quantize_u8)).collect();
    let mut out = Vec::new();
    encoder(&mut out).write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)?;
    Ok(out)
}

/// Decodes any PNG into linear `[0, 1]` RGB.
pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let res = Resolution::new(decoded.width() as usize, decoded.height() as usize);
    Ok(Image::from_fn(res, |col, row| {
        decoded.get_pixel(col as u32, row as u32).0.map(|v| v as f64 / 255.0)
    }))
}

/// 16-bit grayscale PNG of `map / max_value`, clamped to `[0, 1]`.
pub fn encode_png_gray16(map: &ScalarMap, max_value: f64) -> Result<Vec<u8>, ImageIoError> {
    let scale = if max_value > 0.0 { 1.0 / max_value } else { 0.0 };
    let bytes: Vec<u8> = map
        .values
        .iter()
        .flat_map(|v| {
            let v = if v.is_finite() { v * scale } else { 1.0 };
            ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_ne_bytes()
        })
        .collect();
    let mut out = Vec::new();
    encoder(&mut out).write_image(&bytes, map.width as u32, map.height as u32, ExtendedColorType::L16)?;
    Ok(out)
}

pub fn encode_depth(map: &ScalarMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<ScalarMap, ImageIoError> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(ImageIoError::Depth("missing magic".into()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let data = &bytes[16..];
    if data.len() != 4 * width * height {
        return Err(ImageIoError::Depth(format!(
            "expected {} value bytes, found {}",
            4 * width * height,
            data.len()
        )));
    }
    Ok(ScalarMap {
        width,
        height,
        values: data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    })
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image, ImageIoError> {
    decode_png(&std::fs::read(path)?)
}
