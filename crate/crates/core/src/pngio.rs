//! Grayscale / RGB PNG reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageops::{Image, Mask};

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a grayscale PNG as raw sample values plus the maximum sample value
/// for its bit depth.
fn read_gray_samples(path: &Path) -> Result<(Array2<u16>, u16)> {
    let file = File::open(path).map_err(|e| load_err(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| load_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| load_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(load_err(path, format!("expected a grayscale PNG, found {other:?}"))),
    };
    let (samples, max) = match info.bit_depth {
        png::BitDepth::Sixteen => {
            let v: Vec<u16> = buf[..info.buffer_size()]
                .chunks_exact(2 * channels)
                .map(|px| u16::from_be_bytes([px[0], px[1]]))
                .collect();
            (v, u16::MAX)
        }
        _ => {
            let v: Vec<u16> = buf[..info.buffer_size()]
                .chunks_exact(channels)
                .map(|px| px[0] as u16)
                .collect();
            (v, 255)
        }
    };
    let arr = Array2::from_shape_vec((h, w), samples).map_err(|e| load_err(path, e))?;
    Ok((arr, max))
}

/// Loads a grayscale PNG scaled into `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let (raw, max) = read_gray_samples(path)?;
    let scale = 1.0 / max as f32;
    Ok(raw.mapv(|v| v as f32 * scale))
}

/// Loads a mask PNG. Accepts `{0,1}` or `{0,max}` encodings; anything else is
/// reported as an `Err(value)` with the first offending sample.
pub fn read_mask(path: &Path) -> Result<std::result::Result<Mask, u16>> {
    let (raw, max) = read_gray_samples(path)?;
    if let Some(&bad) = raw.iter().find(|&&v| v != 0 && v != 1 && v != max) {
        return Ok(Err(bad));
    }
    Ok(Ok(raw.mapv(|v| u8::from(v != 0))))
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| load_err(path, format!("png encode: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| load_err(path, format!("png encode: {e}")))?;
    writer
        .finish()
        .map_err(|e| load_err(path, format!("png encode: {e}")))?;
    Ok(())
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit grayscale PNG (values clamped to `[0, 1]`).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dim();
    let data: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &data)
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &data)
}

/// Writes an RGB raster stored as `[row, col] -> [r, g, b]`.
pub fn write_rgb(path: &Path, rgb: &Array2<[u8; 3]>) -> Result<()> {
    let (h, w) = rgb.dim();
    let data: Vec<u8> = rgb.iter().flat_map(|px| px.iter().copied()).collect();
    write_png(path, w, h, png::ColorType::Rgb, &data)
}

pub fn read_rgb(path: &Path) -> Result<Array2<[u8; 3]>> {
    let file = File::open(path).map_err(|e| load_err(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| load_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| load_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(load_err(path, "expected 8-bit RGB"));
    }
    let px: Vec<[u8; 3]> = buf[..info.buffer_size()]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Array2::from_shape_vec((info.height as usize, info.width as usize), px).map_err(|e| load_err(path, e))
}
