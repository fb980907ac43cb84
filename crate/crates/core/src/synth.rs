//! Procedural images with controllable detail and graded, labeled degradation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::CurationRecord;
use crate::degrade::{apply_blur, apply_noise};
use crate::error::{Error, Result};
use crate::image::{clamp01, ColorSpace, Image};
use crate::rng::{self, SeededRng};
use crate::spectrum;

/// Shape instances at `detail_level = 1`.
pub const MAX_SHAPES: usize = 40;
/// Blur sigma at severity 1.
pub const BLUR_AT_FULL: f64 = 1.5;
/// Noise sigma at severity 1.
pub const NOISE_AT_FULL: f64 = 0.12;

/// `mos = best - span * severity`, plus Gaussian observer noise when sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosMap {
    pub best: f64,
    pub span: f64,
    pub noise_sigma: f64,
}

impl Default for MosMap {
    fn default() -> Self {
        MosMap {
            best: 5.0,
            span: 4.0,
            noise_sigma: 0.1,
        }
    }
}

impl MosMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.span > 0.0) || self.noise_sigma < 0.0 {
            return Err(Error::Config("mos map must be strictly decreasing with non-negative noise".into()));
        }
        Ok(())
    }

    pub fn expected(&self, severity: f64) -> f64 {
        self.best - self.span * severity
    }

    /// An observed score, clipped to the map's range.
    pub fn observe(&self, severity: f64, rng: &mut SeededRng) -> f64 {
        let v = self.expected(severity) + self.noise_sigma * rng::gaussian(rng);
        v.clamp(self.best - self.span, self.best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub size: usize,
    pub detail_level: f64,
    pub severity_range: [f64; 2],
    pub mos_map: MosMap,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_images: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            n_images,
            size,
            detail_level: 0.3,
            severity_range: [0.0, 1.0],
            mos_map: MosMap::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.severity_range;
        if self.size < 8 {
            return Err(Error::Config("synth size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.detail_level) {
            return Err(Error::Config("detail_level must lie in [0, 1]".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("severity_range must satisfy 0 <= lo <= hi <= 1".into()));
        }
        self.mos_map.validate()
    }
}

pub fn shape_count(detail_level: f64) -> usize {
    libm::ceil(detail_level.clamp(0.0, 1.0) * MAX_SHAPES as f64) as usize
}

/// A generated image with the number of shapes drawn and the fraction of
/// pixels they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub image: Image,
    pub shapes: usize,
    pub coverage: f64,
}

enum Outline {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
}

enum Fill {
    Flat([f64; 3]),
    Stripes { a: [f64; 3], b: [f64; 3], fy: f64, fx: f64, phase: f64 },
}

struct Shape {
    outline: Outline,
    fill: Fill,
}

impl Shape {
    fn covers(&self, y: f64, x: f64) -> bool {
        match self.outline {
            Outline::Disc { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
            Outline::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
        }
    }

    fn color(&self, y: f64, x: f64) -> [f64; 3] {
        match self.fill {
            Fill::Flat(c) => c,
            Fill::Stripes { a, b, fy, fx, phase } => {
                let t = 0.5 + 0.5 * libm::sin(2.0 * PI * (fy * y + fx * x) + phase);
                [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
            }
        }
    }
}

/// Mid-range palette, so additive noise is rarely clipped.
fn color(rng: &mut SeededRng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.1..0.9))
}

fn random_shape(rng: &mut SeededRng, size: f64, detail: f64) -> Shape {
    let extent = size * rng.random_range(0.06..0.25);
    let (cy, cx) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    let outline = if rng.random_bool(0.5) {
        Outline::Disc { cy, cx, r: extent }
    } else {
        let aspect = rng.random_range(0.5..2.0);
        Outline::Rect {
            top: cy - extent,
            left: cx - extent * aspect,
            bottom: cy + extent,
            right: cx + extent * aspect,
        }
    };
    let fill = if rng.random_bool(0.5) {
        Fill::Flat(color(rng))
    } else {
        // cycles per pixel; denser stripes at higher detail
        let freq = rng.random_range(0.02..0.04 + 0.08 * detail);
        let theta = rng.random_range(0.0..PI);
        Fill::Stripes {
            a: color(rng),
            b: color(rng),
            fy: freq * libm::sin(theta),
            fx: freq * libm::cos(theta),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    };
    Shape { outline, fill }
}

/// A linear-gradient background with `shape_count(detail_level)` discs and
/// rectangles drawn over it, each flat or striped. Deterministic in
/// `(spec.seed, index)`.
pub fn gen_texture_detailed(spec: &SynthSpec, index: usize) -> Texture {
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, "texture", index as u64));
    let size = spec.size;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (dy, dx) = (libm::sin(theta), libm::cos(theta));
    let shapes: Vec<Shape> = (0..shape_count(spec.detail_level))
        .map(|_| random_shape(&mut rng, size as f64, spec.detail_level))
        .collect();
    let half = size as f64 / 2.0;
    let norm = half * core::f64::consts::SQRT_2;
    let mut covered = 0usize;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = 0.5 + 0.5 * ((py - half) * dy + (px - half) * dx) / norm;
            let mut rgb = [0, 1, 2].map(|c| c0[c] + (c1[c] - c0[c]) * t);
            let mut hit = false;
            for s in &shapes {
                if s.covers(py, px) {
                    rgb = s.color(py, px);
                    hit = true;
                }
            }
            covered += hit as usize;
            data.extend(rgb.map(clamp01));
        }
    }
    Texture {
        image: Image::new(size, size, ColorSpace::Rgb, data).expect("generated pixels are in range"),
        shapes: shapes.len(),
        coverage: covered as f64 / (size * size) as f64,
    }
}

pub fn gen_texture(spec: &SynthSpec, index: usize) -> Image {
    gen_texture_detailed(spec, index).image
}

/// Blur then noise, both proportional to `severity`; returns the expected
/// score of the map.
pub fn grade_quality(img: &Image, severity: f64, map: &MosMap, rng: &mut SeededRng) -> Result<(Image, f64)> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::param("severity", "must lie in [0, 1]"));
    }
    if severity == 0.0 {
        return Ok((img.clone(), map.expected(0.0)));
    }
    let blurred = apply_blur(img, BLUR_AT_FULL * severity)?;
    let noisy = apply_noise(&blurred, NOISE_AT_FULL * severity, rng)?;
    Ok((noisy, map.expected(severity)))
}

/// Mean log spectral magnitude over the upper half of radial frequencies.
/// Noise dominates this band, so it rises with severity.
pub fn high_frequency_energy(img: &Image) -> Result<f64> {
    Ok(spectrum::radial_spectrum(img)?.band_mean_above(0.5))
}

/// One labeled synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub image: Image,
    pub severity: f64,
    pub mos: f64,
    pub shapes: usize,
    pub coverage: f64,
}

impl SynthItem {
    pub fn record(&self, path: String) -> CurationRecord {
        CurationRecord {
            id: self.id.clone(),
            path,
            width: self.image.width() as u32,
            height: self.image.height() as u32,
            object_count: self.shapes as u32,
            fg_mask_path: None,
            fc: Some(self.coverage),
            mos: Some(self.mos),
        }
    }
}

pub fn item_id(index: usize) -> String {
    format!("synth-{index:05}")
}

pub fn severity_of(spec: &SynthSpec, index: usize) -> f64 {
    let [lo, hi] = spec.severity_range;
    let mut r = rng::seeded(rng::derive_seed(spec.seed, "severity", index as u64));
    lo + (hi - lo) * r.random::<f64>()
}

/// Observed score of item `index`, drawn from its own stream so labels can be
/// read without rendering.
pub fn synth_mos(spec: &SynthSpec, index: usize) -> f64 {
    let mut r = rng::seeded(rng::derive_seed(spec.seed, "mos", index as u64));
    spec.mos_map.observe(severity_of(spec, index), &mut r)
}

pub fn synth_item(spec: &SynthSpec, index: usize) -> Result<SynthItem> {
    let tex = gen_texture_detailed(spec, index);
    let severity = severity_of(spec, index);
    let mut r = rng::seeded(rng::derive_seed(spec.seed, "grade", index as u64));
    let (image, _) = grade_quality(&tex.image, severity, &spec.mos_map, &mut r)?;
    let mos = synth_mos(spec, index);
    Ok(SynthItem {
        id: item_id(index),
        image,
        severity,
        mos,
        shapes: tex.shapes,
        coverage: tex.coverage,
    })
}

/// A `frames`-long clip: the texture drifting one pixel per frame
/// (wrapping), each frame graded at the item's severity.
pub fn synth_video(spec: &SynthSpec, index: usize, frames: usize) -> Result<(Vec<Image>, f64)> {
    let base = gen_texture(spec, index);
    let severity = severity_of(spec, index);
    let mut r = rng::seeded(rng::derive_seed(spec.seed, "video", index as u64));
    let size = spec.size;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let shifted = Image::from_fn(size, size, ColorSpace::Rgb, |y, x, c| base.get(y, (x + t) % size, c));
        out.push(grade_quality(&shifted, severity, &spec.mos_map, &mut r)?.0);
    }
    Ok((out, synth_mos(spec, index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{srcc, ScoreTable};

    #[test]
    fn texture_is_deterministic() {
        let spec = SynthSpec::new(4, 32, 9);
        assert_eq!(gen_texture(&spec, 2), gen_texture(&spec, 2));
        assert_ne!(gen_texture(&spec, 2), gen_texture(&spec, 3));
    }

    #[test]
    fn zero_detail_is_a_plain_gradient() {
        let spec = SynthSpec {
            detail_level: 0.0,
            ..SynthSpec::new(1, 32, 1)
        };
        let t = gen_texture_detailed(&spec, 0);
        assert_eq!(t.shapes, 0);
        assert_eq!(t.coverage, 0.0);
        // every channel of a linear gradient is affine in (y, x), so second
        // differences vanish away from clipping
        let img = &t.image;
        for y in 1..31 {
            for x in 1..31 {
                for c in 0..3 {
                    let d2 = img.get(y - 1, x, c) + img.get(y + 1, x, c) - 2.0 * img.get(y, x, c);
                    assert!(d2.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn more_detail_means_more_shapes_and_energy() {
        assert!(shape_count(0.3) < shape_count(0.6));
        assert!(shape_count(0.6) < shape_count(1.0));
        let mean_energy = |detail: f64| {
            let spec = SynthSpec {
                detail_level: detail,
                ..SynthSpec::new(50, 64, 4)
            };
            (0..50)
                .map(|i| spectrum::radial_spectrum(&gen_texture(&spec, i)).unwrap().band_mean_above(0.5))
                .sum::<f64>()
                / 50.0
        };
        let (low, mid, high) = (mean_energy(0.1), mean_energy(0.5), mean_energy(1.0));
        assert!(low < mid && mid < high, "{low} {mid} {high}");
    }

    #[test]
    fn grading_endpoints() {
        let spec = SynthSpec::new(1, 32, 5);
        let img = gen_texture(&spec, 0);
        let map = MosMap::default();
        let mut r = rng::seeded(0);
        let (same, mos0) = grade_quality(&img, 0.0, &map, &mut r).unwrap();
        assert_eq!(same, img);
        assert_eq!(mos0, 5.0);
        assert_eq!(grade_quality(&img, 1.0, &map, &mut r).unwrap().1, 1.0);
        let scores: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&s| map.expected(s)).collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]));
        assert!(grade_quality(&img, 1.5, &map, &mut r).is_err());
    }

    #[test]
    fn severity_is_recoverable() {
        let spec = SynthSpec::new(200, 64, 11);
        let (stat, sev): (Vec<f64>, Vec<f64>) = (0..200)
            .map(|i| {
                let it = synth_item(&spec, i).unwrap();
                (high_frequency_energy(&it.image).unwrap(), it.severity)
            })
            .unzip();
        let s = srcc(&ScoreTable::new(stat, sev).unwrap()).unwrap();
        assert!(s >= 0.9, "srcc {s}");
    }

    #[test]
    fn items_are_labeled_and_deterministic() {
        let spec = SynthSpec::new(3, 32, 2);
        let a = synth_item(&spec, 1).unwrap();
        assert_eq!(a, synth_item(&spec, 1).unwrap());
        assert!((1.0..=5.0).contains(&a.mos));
        let rec = a.record("x.png".into());
        assert_eq!(rec.mos, Some(a.mos));
        assert_eq!((rec.width, rec.height), (32, 32));
        rec.validate().unwrap();
        let (frames, mos) = synth_video(&spec, 0, 4).unwrap();
        assert_eq!(frames.len(), 4);
        assert!((1.0..=5.0).contains(&mos));
    }
}
