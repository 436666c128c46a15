//! Grayscale PNG input and output.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::grid::Grid;
use crate::util::{read, write_atomic};
use crate::{Error, Result};

/// Round samples to the 16-bit levels a PNG round trip would produce.
pub fn quantize_u16(grid: &Grid) -> Grid {
    let mut out = grid.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = to_u16(*v) as f64 / u16::MAX as f64);
    out
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16
}

/// Encode `[0, 1]` samples as a 16-bit grayscale PNG.
pub fn encode_png16(grid: &Grid) -> Result<Vec<u8>> {
    let pixels: Vec<u16> = grid.data().iter().map(|&v| to_u16(v)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, pixels)
            .ok_or_else(|| Error::Data("pixel buffer does not match grid size".into()))?;
    let mut bytes = Vec::new();
    DynamicImage::ImageLuma16(buf)
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    Ok(bytes)
}

/// Decode an 8- or 16-bit grayscale PNG into `[0, 1]` samples.
pub fn decode_png(bytes: &[u8]) -> Result<Grid> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / u16::MAX as f64)
            .collect(),
        other => {
            return Err(Error::format(
                "PNG",
                format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    Grid::new(h, w, data)
}

pub fn read_png(path: &Path) -> Result<Grid> {
    decode_png(&read(path)?).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_png16(path: &Path, grid: &Grid) -> Result<()> {
    write_atomic(path, &encode_png16(grid)?)
}

/// Encode an 8-bit RGB image from interleaved samples.
pub fn encode_rgb8(height: usize, width: usize, rgb: Vec<u8>) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::Data("RGB buffer does not match image size".into()))?;
    let mut bytes = Vec::new();
    DynamicImage::ImageRgb8(buf)
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    Ok(bytes)
}
