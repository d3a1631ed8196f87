//! PNG input/output and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::image::GreyImage;

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Decode a PNG into intensities on the `[0, 255]` scale.
///
/// 16-bit samples are divided by 257; colour images are reduced to luma with
/// the BT.601 weights; alpha is ignored.
pub fn read_png(path: &Path) -> Result<GreyImage> {
    let bytes = fs::read(path)?;
    decode_png(&bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<GreyImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Decode(e.to_string()))?;
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let luma = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| f64::from(p.0[0])).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 257.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| f64::from(p.0[0]) / 257.0).collect(),
        DynamicImage::ImageRgb8(b) => b.pixels().map(|p| luma(p.0[0].into(), p.0[1].into(), p.0[2].into())).collect(),
        DynamicImage::ImageRgba8(b) => b.pixels().map(|p| luma(p.0[0].into(), p.0[1].into(), p.0[2].into())).collect(),
        other => other.to_rgb32f().pixels().map(|p| 255.0 * luma(p.0[0].into(), p.0[1].into(), p.0[2].into())).collect(),
    };
    GreyImage::new(rows, cols, pixels)
}

/// Encode intensities on `[0, 255]` as a 16-bit greyscale PNG. Values are
/// clamped to the range and scaled by 257.
pub fn encode_png16(img: &GreyImage) -> Result<Vec<u8>> {
    let data: Vec<u8> = img
        .pixels()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 255.0) * 257.0).round() as u16).to_be_bytes())
        .collect();
    encode(img.cols(), img.rows(), png::BitDepth::Sixteen, &data)
}

/// Encode a binary image as a 1-bit PNG: `true` is black.
pub fn encode_png_binary(rows: usize, cols: usize, black: &[bool]) -> Result<Vec<u8>> {
    if black.len() != rows * cols {
        return Err(Error::mismatch(rows * cols, black.len()));
    }
    let stride = cols.div_ceil(8);
    let mut data = vec![0u8; stride * rows];
    for r in 0..rows {
        for c in 0..cols {
            if !black[r * cols + c] {
                data[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    encode(cols, rows, png::BitDepth::One, &data)
}

fn encode(cols: usize, rows: usize, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png16(path: &Path, img: &GreyImage) -> Result<()> {
    atomic_write(path, &encode_png16(img)?)
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}
