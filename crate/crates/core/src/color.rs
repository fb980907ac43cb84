//! Color conversions between sRGB and CIE-LAB (D65), HSV and grayscale.
//!
//! Raw conversions use conventional units (L in [0,100], a/b roughly in
//! [-128,127], hue in degrees). The `*_normalized` variants map every channel
//! into `[0,1]`: `L/100`, `(a+128)/255`, `(b+128)/255`, `H/360`.

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};

const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        libm::pow((c + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * libm::pow(c, 1.0 / 2.4) - 0.055
    }
}

pub fn rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    [
        0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b,
        0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b,
        0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b,
    ]
}

pub fn xyz_to_rgb(xyz: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = xyz;
    [
        3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z,
        -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z,
        0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z,
    ]
    .map(linear_to_srgb)
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        libm::cbrt(t)
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > LAB_EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = rgb_to_xyz(rgb);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    xyz_to_rgb([
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ])
}

/// RGB to `(hue degrees in [0,360), saturation, value)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * libm::fmod((g - b) / delta, 6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let hue = if hue < 0.0 { hue + 360.0 } else { hue };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = libm::fmod(libm::fmod(h, 360.0) + 360.0, 360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - libm::fabs(libm::fmod(hp, 2.0) - 1.0));
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_lab_normalized(rgb: [f64; 3]) -> [f64; 3] {
    let [l, a, b] = rgb_to_lab(rgb);
    [l / 100.0, (a + 128.0) / 255.0, (b + 128.0) / 255.0].map(crate::image::clamp01)
}

pub fn lab_normalized_to_rgb(v: [f64; 3]) -> [f64; 3] {
    lab_to_rgb([v[0] * 100.0, v[1] * 255.0 - 128.0, v[2] * 255.0 - 128.0])
}

pub fn rgb_to_hsv_normalized(rgb: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    [h / 360.0, s, v]
}

pub fn hsv_normalized_to_rgb(v: [f64; 3]) -> [f64; 3] {
    hsv_to_rgb([v[0] * 360.0, v[1], v[2]])
}

/// Converts an RGB image into `target`, normalizing channels into `[0,1]`.
/// Converting to RGB returns a copy.
pub fn convert(img: &Image, target: ColorSpace) -> Result<Image> {
    if img.space() != ColorSpace::Rgb {
        return Err(Error::param("space", "color conversion expects an RGB input"));
    }
    let out = match target {
        ColorSpace::Rgb => img.clone(),
        ColorSpace::Lab => img.map_pixels(rgb_to_lab_normalized),
        ColorSpace::Hsv => img.map_pixels(rgb_to_hsv_normalized),
        ColorSpace::Gray => img.map_pixels(|p| {
            let y = luma(p);
            [y, y, y]
        }),
    };
    Ok(out.with_space(target))
}
