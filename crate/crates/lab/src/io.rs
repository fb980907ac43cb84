//! Raster IO. Images are written as 16-bit RGB PNG, which keeps synthetic
//! data lossless up to 1/65535 quantization.

use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, Rgb};
use qptlab_core::{ColorSpace, Image};

const MAX16: f64 = 65535.0;

/// Loads any PNG as RGB in `[0, 1]`. 8-bit files are widened exactly.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let rgb = decoded.to_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / MAX16).collect();
    Ok(Image::new(h as usize, w as usize, ColorSpace::Rgb, data)?)
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAX16).round() as u16
}

/// Writes the raw channel values as 16-bit RGB regardless of the color-space tag.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u16> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
        .context("image buffer size mismatch")?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing image {}", path.display()))
}

/// Reads a binary mask: any nonzero luma counts as foreground.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let gray = image::open(path)
        .with_context(|| format!("reading mask {}", path.display()))?
        .to_luma16();
    let (w, h) = gray.dimensions();
    let mask = gray.into_raw().into_iter().map(|v| u8::from(v != 0)).collect();
    Ok((mask, h as usize, w as usize))
}

/// Image quantized the way [`save_image`] stores it.
pub fn stored_form(img: &Image) -> Image {
    img.map_pixels(|p| p.map(|v| f64::from(quantize(v)) / MAX16))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, ColorSpace::Rgb, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 104.0);
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, stored_form(&img));
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / MAX16 + 1e-15);
    }

    #[test]
    fn eight_bit_files_widen_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.png");
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 1, vec![0, 51, 255, 128, 1, 2]).unwrap();
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.get(0, 0, 1), 51.0 / 255.0);
        assert_eq!(img.get(0, 1, 0), 128.0 / 255.0);
    }

    #[test]
    fn masks_are_binarized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let buf: ImageBuffer<image::Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(3, 1, vec![0, 255, 7]).unwrap();
        buf.save(&path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), (vec![0, 1, 1], 1, 3));
    }
}
