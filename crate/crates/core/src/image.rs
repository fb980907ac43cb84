use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Color space tag carried by every [`Image`].
///
/// Non-RGB spaces store affinely normalized channels so every image holds
/// values in `[0, 1]` regardless of its space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Lab,
    Hsv,
    Gray,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 4] = [ColorSpace::Rgb, ColorSpace::Lab, ColorSpace::Hsv, ColorSpace::Gray];

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Lab => "lab",
            ColorSpace::Hsv => "hsv",
            ColorSpace::Gray => "gray",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ColorSpace::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

/// Number of channels of every image. Grayscale is replicated.
pub const CHANNELS: usize = 3;

/// An `H×W×3` raster of `f64` values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("dims", "height and width must be at least 1"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::param("data", "length must equal height*width*3"));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("data", alloc::format!("value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            space,
            data,
        })
    }

    /// Builds an image from raw values, clamping each into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Image {
            height,
            width,
            space,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Image::from_fn(height, width, ColorSpace::Rgb, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let w = self.width;
        self.data[(y * w + x) * CHANNELS + c] = clamp01(v);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn with_space(mut self, space: ColorSpace) -> Self {
        self.space = space;
        self
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Applies `f` to every pixel triple; results are clamped.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Image {
        let mut data = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(3).zip(data.chunks_exact_mut(3)) {
            let out = f([src[0], src[1], src[2]]);
            for c in 0..3 {
                dst[c] = clamp01(out[c]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            space: self.space,
            data,
        }
    }

    /// Copies out the `h×w` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::param("crop", "window outside image bounds"));
        }
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in top..top + h {
            let start = (y * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(Image {
            height: h,
            width: w,
            space: self.space,
            data,
        })
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width * CHANNELS) {
            for px in row.chunks_exact(CHANNELS).rev() {
                data.extend_from_slice(px);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            space: self.space,
            data,
        }
    }

    /// Largest absolute per-value difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Image) -> Option<f64> {
        if self.height != other.height || self.width != other.width {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| libm::fabs(a - b))
                .fold(0.0, f64::max),
        )
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Per-pixel luminance (Rec. 601 weights) for RGB, channel mean otherwise.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| match self.space {
                ColorSpace::Rgb => crate::color::luma([p[0], p[1], p[2]]),
                _ => (p[0] + p[1] + p[2]) / 3.0,
            })
            .collect()
    }
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_ranges() {
        assert!(Image::new(0, 4, ColorSpace::Rgb, vec![]).is_err());
        assert!(Image::new(2, 2, ColorSpace::Rgb, vec![0.5; 11]).is_err());
        assert!(Image::new(1, 1, ColorSpace::Rgb, vec![0.5, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, ColorSpace::Rgb, vec![0.5, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn crop_copies_window() {
        let img = Image::from_fn(4, 5, ColorSpace::Rgb, |y, x, c| (y * 100 + x * 10 + c) as f64 / 1000.0);
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!((c.height(), c.width()), (2, 3));
        assert_eq!(c.get(0, 0, 1), img.get(1, 2, 1));
        assert_eq!(c.get(1, 2, 2), img.get(2, 4, 2));
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
