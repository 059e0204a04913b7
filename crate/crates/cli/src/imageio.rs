//! PNG reading and writing for [`PixelImage`].

use std::path::Path;

use attnguard::pgd::ProtectedResult;
use attnguard::PixelImage;
use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{CliError, CliResult};

/// Worst-case error allowed by a 16-bit round trip.
pub const QUANTIZATION_TOLERANCE: f64 = 1.0 / 65536.0;

fn to_pixels(img: DynamicImage) -> CliResult<PixelImage> {
    let rgb = img.into_rgb16();
    let (w, h) = rgb.dimensions();
    let data: Vec<f64> = rgb
        .as_raw()
        .iter()
        .map(|v| f64::from(*v) / 65535.0)
        .collect();
    Ok(PixelImage::new(h as usize, w as usize, data)?)
}

/// Center-crops to a square, resizes to `size × size` and normalizes to
/// `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> CliResult<PixelImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let img = if w != h {
        img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
    } else {
        img
    };
    let img = if side as usize != size {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    to_pixels(img)
}

/// Reads a PNG at its stored size.
pub fn read_png(path: &Path) -> CliResult<PixelImage> {
    to_pixels(image::open(path)?)
}

pub fn quantize16(image: &PixelImage) -> Vec<u16> {
    image
        .data()
        .iter()
        .map(|v| (v * 65535.0).round() as u16)
        .collect()
}

pub fn save_png16(image: &PixelImage, path: &Path) -> CliResult<()> {
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(
        image.width() as u32,
        image.height() as u32,
        quantize16(image),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn save_png8(image: &PixelImage, path: &Path) -> CliResult<()> {
    let data: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data)
            .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes `result.image` as a 16-bit PNG and verifies the read-back copy
/// stays within the budget. Nothing is written if quantization alone would
/// break the budget.
pub fn save_protected(result: &ProtectedResult, path: &Path) -> CliResult<PixelImage> {
    let eta = result.config.eta;
    let quantized: Vec<f64> = quantize16(&result.image)
        .iter()
        .map(|q| f64::from(*q) / 65535.0)
        .collect();
    let before = quantized
        .iter()
        .zip(result.clean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if before > eta + QUANTIZATION_TOLERANCE {
        return Err(CliError::Budget(format!(
            "{}: quantized image is {before:.3e} from the clean image, budget {eta:.3e}",
            path.display()
        )));
    }
    save_png16(&result.image, path)?;
    let back = read_png(path)?;
    let to_clean = back.linf_distance(&result.clean);
    let to_protected = back.linf_distance(&result.image);
    if to_clean > eta + QUANTIZATION_TOLERANCE || to_protected > QUANTIZATION_TOLERANCE {
        let _ = std::fs::remove_file(path);
        return Err(CliError::Budget(format!(
            "{}: read-back drifted ({to_clean:.3e} from clean, {to_protected:.3e} from protected)",
            path.display()
        )));
    }
    Ok(back)
}
