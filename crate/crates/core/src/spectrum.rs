//! Radially averaged log-magnitude spectra.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_BINS: usize = 16;
/// Additive floor inside the logarithm; empty annuli sit at `ln(FLOOR)`.
pub const FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    /// Radial frequency range in cycles per image, `lo < r <= hi`.
    pub lo: f64,
    pub hi: f64,
    pub log_magnitude: f64,
}

/// Bin 0 holds the DC term alone; the remaining bins split `(0, n/sqrt(2)]`
/// into equal-width annuli.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub bins: Vec<SpectrumBin>,
}

impl SpectrumProfile {
    /// Mean log-magnitude over the bins whose lower edge is at or above
    /// `fraction` of the highest frequency.
    pub fn band_mean_above(&self, fraction: f64) -> f64 {
        let top = self.bins.last().map_or(0.0, |b| b.hi);
        let vals: Vec<f64> = self
            .bins
            .iter()
            .skip(1)
            .filter(|b| b.lo >= fraction * top)
            .map(|b| b.log_magnitude)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    fn norm(self) -> f64 {
        libm::hypot(self.re, self.im)
    }
}

/// In-place forward DFT of one line: radix-2 when `len` is a power of two,
/// direct summation otherwise.
fn dft_line(line: &mut [Complex], scratch: &mut Vec<Complex>) {
    let n = line.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                line.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let ang = -2.0 * PI / len as f64;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let w = Complex {
                        re: libm::cos(ang * k as f64),
                        im: libm::sin(ang * k as f64),
                    };
                    let a = line[start + k];
                    let b = line[start + k + len / 2].mul(w);
                    line[start + k] = Complex { re: a.re + b.re, im: a.im + b.im };
                    line[start + k + len / 2] = Complex { re: a.re - b.re, im: a.im - b.im };
                }
            }
            len <<= 1;
        }
    } else {
        scratch.clear();
        for k in 0..n {
            let mut acc = Complex { re: 0.0, im: 0.0 };
            for (t, v) in line.iter().enumerate() {
                let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                acc.re += v.re * libm::cos(ang) - v.im * libm::sin(ang);
                acc.im += v.re * libm::sin(ang) + v.im * libm::cos(ang);
            }
            scratch.push(acc);
        }
        line.copy_from_slice(scratch);
    }
}

/// 2-D DFT magnitudes of a square real signal, row-major `n×n`.
pub fn dft2_magnitude(signal: &[f64], n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex> = signal.iter().map(|&re| Complex { re, im: 0.0 }).collect();
    let mut scratch = Vec::with_capacity(n);
    for row in buf.chunks_exact_mut(n) {
        dft_line(row, &mut scratch);
    }
    let mut col = vec![Complex { re: 0.0, im: 0.0 }; n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        dft_line(&mut col, &mut scratch);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    buf.into_iter().map(Complex::norm).collect()
}

pub fn radial_spectrum(img: &Image) -> Result<SpectrumProfile> {
    radial_spectrum_with_bins(img, DEFAULT_BINS)
}

/// Radially averaged `ln(FLOOR + |F| / n^2)` of the image luminance.
pub fn radial_spectrum_with_bins(img: &Image, bins: usize) -> Result<SpectrumProfile> {
    if img.height() != img.width() {
        return Err(Error::param("image", "radial spectrum needs a square image"));
    }
    if bins < 8 {
        return Err(Error::param("bins", "at least 8 bins"));
    }
    let n = img.height();
    let mags = dft2_magnitude(&img.luminance(), n);
    let r_max = n as f64 / core::f64::consts::SQRT_2;
    let width = r_max / (bins - 1) as f64;
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let norm = (n * n) as f64;
    for ky in 0..n {
        let fy = ky.min(n - ky) as f64;
        for kx in 0..n {
            let fx = kx.min(n - kx) as f64;
            let r = libm::hypot(fy, fx);
            let bin = if r == 0.0 {
                0
            } else {
                (1 + (libm::ceil(r / width) as usize).saturating_sub(1)).min(bins - 1)
            };
            sums[bin] += libm::log(FLOOR + mags[ky * n + kx] / norm);
            counts[bin] += 1;
        }
    }
    let bins = (0..bins)
        .map(|b| SpectrumBin {
            lo: if b == 0 { 0.0 } else { (b - 1) as f64 * width },
            hi: if b == 0 { 0.0 } else { b as f64 * width },
            log_magnitude: if counts[b] == 0 {
                libm::log(FLOOR)
            } else {
                sums[b] / counts[b] as f64
            },
        })
        .collect();
    Ok(SpectrumProfile { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::apply_blur;
    use crate::image::ColorSpace;

    fn naive_dft2(signal: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ang = -2.0 * PI * ((u * y) as f64 / n as f64 + (v * x) as f64 / n as f64);
                        re += signal[y * n + x] * ang.cos();
                        im += signal[y * n + x] * ang.sin();
                    }
                }
                out[u * n + v] = (re * re + im * im).sqrt();
            }
        }
        out
    }

    #[test]
    fn fft_and_direct_paths_match_naive() {
        for n in [8usize, 6] {
            let signal: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
            let fast = dft2_magnitude(&signal, n);
            let slow = naive_dft2(&signal, n);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = Image::filled(32, 32, [0.4, 0.4, 0.4]);
        let p = radial_spectrum(&img).unwrap();
        assert_eq!(p.bins.len(), DEFAULT_BINS);
        assert!((p.bins[0].log_magnitude - 0.4f64.ln()).abs() < 1e-9);
        for b in &p.bins[1..] {
            assert!(b.log_magnitude.is_finite());
            assert!((b.log_magnitude - FLOOR.ln()).abs() < 1e-3, "{b:?}");
        }
    }

    #[test]
    fn blur_lowers_high_bins() {
        let img = Image::from_fn(64, 64, ColorSpace::Rgb, |y, x, _| ((y * 13 + x * 7) % 5) as f64 / 4.0);
        let a = radial_spectrum(&img).unwrap();
        let b = radial_spectrum(&apply_blur(&img, 2.0).unwrap()).unwrap();
        for (orig, blurred) in a.bins.iter().zip(&b.bins).skip(DEFAULT_BINS / 2) {
            assert!(blurred.log_magnitude < orig.log_magnitude, "{orig:?} vs {blurred:?}");
        }
    }

    #[test]
    fn sinusoid_peaks_in_its_annulus() {
        let n = 64;
        for k in [4usize, 9, 20] {
            let img = Image::from_fn(n, n, ColorSpace::Gray, |_, x, _| {
                0.5 + 0.4 * (2.0 * PI * (k * x) as f64 / n as f64).sin()
            });
            let p = radial_spectrum(&img).unwrap();
            let (best, _) = p.bins[1..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.log_magnitude.total_cmp(&b.1.log_magnitude))
                .unwrap();
            let bin = &p.bins[best + 1];
            assert!(bin.lo < k as f64 && k as f64 <= bin.hi, "k={k} landed in {bin:?}");
        }
    }

    #[test]
    fn rejects_non_square_and_few_bins() {
        assert!(radial_spectrum(&Image::filled(4, 5, [0.0; 3])).is_err());
        assert!(radial_spectrum_with_bins(&Image::filled(4, 4, [0.0; 3]), 7).is_err());
    }
}
