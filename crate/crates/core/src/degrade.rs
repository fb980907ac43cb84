//! Seeded degradation engine: resize, blur, sharpen, Gaussian noise, color
//! jitter and color-space transformation, composed single, sequentially or
//! with shuffle/skip/repeat, always followed by a random crop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color;
use crate::error::{Error, Result};
use crate::image::{clamp01, ColorSpace, Image, CHANNELS};
use crate::rng::{self, SeededRng};

fn require_rgb(img: &Image, op: &'static str) -> Result<()> {
    if img.space() != ColorSpace::Rgb {
        return Err(Error::param(op, "expects an RGB image"));
    }
    Ok(())
}

/// Bilinear resize to `round(scale * dims)` with half-pixel centers.
pub fn apply_resize(img: &Image, scale: f64) -> Result<Image> {
    if !(0.25..=1.0).contains(&scale) {
        return Err(Error::param("scale", "must lie in [0.25, 1.0]"));
    }
    require_rgb(img, "resize")?;
    let out_h = (libm::round(img.height() as f64 * scale) as usize).max(1);
    let out_w = (libm::round(img.width() as f64 * scale) as usize).max(1);
    Ok(resize_to(img, out_h, out_w))
}

/// Bilinear resampling to an explicit size. Channel-agnostic.
pub fn resize_to(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height() && out_w == img.width() {
        return img.clone();
    }
    let ry = img.height() as f64 / out_h as f64;
    let rx = img.width() as f64 / out_w as f64;
    let axis = |dst: usize, ratio: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, rx, img.width())).collect();
    let mut out = Image::from_fn(out_h, out_w, img.space(), |_, _, _| 0.0);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, ry, img.height());
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..CHANNELS {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.set(y, x, c, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Mirror index into `[0, len)` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Normalized 1-D Gaussian kernel truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (libm::ceil(3.0 * sigma) as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_separable(img: &Image, kernel: &[f64]) -> Image {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - r, w);
                    acc += kv * img.get(y, sx, c);
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    Image::from_fn(h, w, img.space(), |y, x, c| {
        let mut acc = 0.0;
        for (k, kv) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - r, h);
            acc += kv * tmp[(sy * w + x) * CHANNELS + c];
        }
        acc
    })
}

/// Gaussian blur with reflect padding.
pub fn apply_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma <= 5.0) {
        return Err(Error::param("sigma", "blur sigma must lie in (0, 5]"));
    }
    Ok(convolve_separable(img, &gaussian_kernel(sigma)))
}

/// Unsharp mask: `clip(img + amount * (img - blur(img, sigma)))`.
pub fn apply_sharpen(img: &Image, amount: f64, sigma: f64) -> Result<Image> {
    if !(amount > 0.0 && amount <= 2.0) {
        return Err(Error::param("amount", "sharpen amount must lie in (0, 2]"));
    }
    let blurred = apply_blur(img, sigma)?;
    let mut out = img.clone();
    for (o, b) in out.data_mut().iter_mut().zip(blurred.data()) {
        *o = clamp01(*o + amount * (*o - b));
    }
    Ok(out)
}

/// Additive iid Gaussian noise with standard deviation `sigma`, clipped.
pub fn apply_noise(img: &Image, sigma: f64, rng: &mut SeededRng) -> Result<Image> {
    if !(0.0..=0.2).contains(&sigma) {
        return Err(Error::param("sigma", "noise sigma must lie in [0, 0.2]"));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for v in out.data_mut() {
        *v = clamp01(*v + sigma * rng::gaussian(rng));
    }
    Ok(out)
}

/// Closed interval a factor is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        ParamRange { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        ParamRange { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        if self.lo == self.hi {
            // keep the stream aligned with the non-degenerate case
            let _: f64 = rng.random();
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, name: &'static str, min: f64, max: f64, open_min: bool) -> Result<()> {
        let lo_ok = if open_min { self.lo > min } else { self.lo >= min };
        if !(lo_ok && self.hi <= max && self.lo <= self.hi) {
            return Err(Error::param(name, alloc::format!("range [{}, {}] invalid", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Multiplicative brightness/contrast/saturation factors and a hue shift in turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    pub brightness: ParamRange,
    pub contrast: ParamRange,
    pub saturation: ParamRange,
    pub hue: ParamRange,
}

impl JitterRanges {
    pub const IDENTITY: JitterRanges = JitterRanges {
        brightness: ParamRange::fixed(1.0),
        contrast: ParamRange::fixed(1.0),
        saturation: ParamRange::fixed(1.0),
        hue: ParamRange::fixed(0.0),
    };
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            brightness: ParamRange::new(0.8, 1.2),
            contrast: ParamRange::new(0.8, 1.2),
            saturation: ParamRange::new(0.8, 1.2),
            hue: ParamRange::new(-0.05, 0.05),
        }
    }
}

fn adjust_brightness(img: &Image, f: f64) -> Image {
    img.map_pixels(|p| p.map(|v| v * f))
}

fn adjust_contrast(img: &Image, f: f64) -> Image {
    let lum = img.luminance();
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    img.map_pixels(|p| p.map(|v| f * v + (1.0 - f) * mean))
}

fn adjust_saturation(img: &Image, f: f64) -> Image {
    img.map_pixels(|p| {
        let g = color::luma(p);
        p.map(|v| f * v + (1.0 - f) * g)
    })
}

fn adjust_hue(img: &Image, turns: f64) -> Image {
    img.map_pixels(|p| {
        let [h, s, v] = color::rgb_to_hsv(p);
        color::hsv_to_rgb([h + 360.0 * turns, s, v])
    })
}

/// Brightness, contrast, saturation and hue jitter applied in a random order.
pub fn apply_color_jitter(img: &Image, ranges: &JitterRanges, rng: &mut SeededRng) -> Result<Image> {
    require_rgb(img, "color_jitter")?;
    let factors = [
        ranges.brightness.sample(rng),
        ranges.contrast.sample(rng),
        ranges.saturation.sample(rng),
        ranges.hue.sample(rng),
    ];
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        let f = factors[op];
        out = match op {
            0 if f != 1.0 => adjust_brightness(&out, f),
            1 if f != 1.0 => adjust_contrast(&out, f),
            2 if f != 1.0 => adjust_saturation(&out, f),
            3 if f != 0.0 => adjust_hue(&out, f),
            _ => out,
        };
    }
    Ok(out)
}

/// Color-space transformation of an RGB image, channels normalized to `[0,1]`.
pub fn apply_cst(img: &Image, target: ColorSpace) -> Result<Image> {
    color::convert(img, target)
}

/// Reflect-pads so both dimensions are at least `size`, splitting the padding
/// evenly between the two sides.
pub fn pad_reflect_to(img: &Image, size: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    if h >= size && w >= size {
        return img.clone();
    }
    let out_h = h.max(size);
    let out_w = w.max(size);
    let top = ((out_h - h) / 2) as isize;
    let left = ((out_w - w) / 2) as isize;
    Image::from_fn(out_h, out_w, img.space(), |y, x, c| {
        img.get(reflect_index(y as isize - top, h), reflect_index(x as isize - left, w), c)
    })
}

/// Uniformly placed `size×size` window. Undersized inputs are reflect-padded first.
pub fn random_crop(img: &Image, size: usize, rng: &mut SeededRng) -> Result<Image> {
    let (top, left, padded) = crop_offset(img, size, rng)?;
    padded.crop(top, left, size, size)
}

/// The offset `random_crop` would draw, together with the (possibly padded) source.
pub fn crop_offset(img: &Image, size: usize, rng: &mut SeededRng) -> Result<(usize, usize, Image)> {
    if size == 0 {
        return Err(Error::param("crop_size", "must be positive"));
    }
    let padded = pad_reflect_to(img, size);
    let top = rng.random_range(0..=padded.height() - size);
    let left = rng.random_range(0..=padded.width() - size);
    Ok((top, left, padded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Resize,
    Blur,
    Sharpen,
    GaussianNoise,
    ColorJitter,
    Cst,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        DegradationKind::Resize,
        DegradationKind::Blur,
        DegradationKind::Sharpen,
        DegradationKind::GaussianNoise,
        DegradationKind::ColorJitter,
        DegradationKind::Cst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Resize => "resize",
            DegradationKind::Blur => "blur",
            DegradationKind::Sharpen => "sharpen",
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::ColorJitter => "color_jitter",
            DegradationKind::Cst => "cst",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = match s {
            "noise" => "gaussian_noise",
            "jitter" => "color_jitter",
            other => other,
        };
        DegradationKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// The step with the default parameter ranges.
    pub fn default_step(self) -> DegradationStep {
        match self {
            DegradationKind::Resize => DegradationStep::Resize {
                scale: ParamRange::new(0.5, 1.0),
            },
            DegradationKind::Blur => DegradationStep::Blur {
                sigma: ParamRange::new(0.1, 2.0),
            },
            DegradationKind::Sharpen => DegradationStep::Sharpen {
                amount: ParamRange::new(0.2, 1.0),
                sigma: 1.0,
            },
            DegradationKind::GaussianNoise => DegradationStep::GaussianNoise {
                sigma: ParamRange::new(0.01, 0.1),
            },
            DegradationKind::ColorJitter => DegradationStep::ColorJitter(JitterRanges::default()),
            DegradationKind::Cst => DegradationStep::Cst {
                targets: ColorSpace::ALL.to_vec(),
            },
        }
    }
}

/// One degradation with the ranges its parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationStep {
    Resize { scale: ParamRange },
    Blur { sigma: ParamRange },
    Sharpen { amount: ParamRange, sigma: f64 },
    GaussianNoise { sigma: ParamRange },
    ColorJitter(JitterRanges),
    Cst { targets: Vec<ColorSpace> },
}

impl DegradationStep {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationStep::Resize { .. } => DegradationKind::Resize,
            DegradationStep::Blur { .. } => DegradationKind::Blur,
            DegradationStep::Sharpen { .. } => DegradationKind::Sharpen,
            DegradationStep::GaussianNoise { .. } => DegradationKind::GaussianNoise,
            DegradationStep::ColorJitter(_) => DegradationKind::ColorJitter,
            DegradationStep::Cst { .. } => DegradationKind::Cst,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DegradationStep::Resize { scale } => scale.validate("resize.scale", 0.25, 1.0, false),
            DegradationStep::Blur { sigma } => sigma.validate("blur.sigma", 0.0, 5.0, true),
            DegradationStep::Sharpen { amount, sigma } => {
                amount.validate("sharpen.amount", 0.0, 2.0, true)?;
                if !(*sigma > 0.0 && *sigma <= 5.0) {
                    return Err(Error::param("sharpen.sigma", "must lie in (0, 5]"));
                }
                Ok(())
            }
            DegradationStep::GaussianNoise { sigma } => sigma.validate("noise.sigma", 0.0, 0.2, false),
            DegradationStep::ColorJitter(j) => {
                j.brightness.validate("jitter.brightness", 0.0, f64::INFINITY, false)?;
                j.contrast.validate("jitter.contrast", 0.0, f64::INFINITY, false)?;
                j.saturation.validate("jitter.saturation", 0.0, f64::INFINITY, false)?;
                j.hue.validate("jitter.hue", -0.5, 0.5, false)
            }
            DegradationStep::Cst { targets } => {
                if targets.is_empty() {
                    return Err(Error::param("cst.targets", "at least one target space"));
                }
                Ok(())
            }
        }
    }

    fn apply(&self, img: &Image, rng: &mut SeededRng) -> Result<Image> {
        match self {
            DegradationStep::Resize { scale } => apply_resize(img, scale.sample(rng)),
            DegradationStep::Blur { sigma } => apply_blur(img, sigma.sample(rng)),
            DegradationStep::Sharpen { amount, sigma } => apply_sharpen(img, amount.sample(rng), *sigma),
            DegradationStep::GaussianNoise { sigma } => apply_noise(img, sigma.sample(rng), rng),
            DegradationStep::ColorJitter(ranges) => apply_color_jitter(img, ranges, rng),
            DegradationStep::Cst { targets } => apply_cst(img, draw_cst_target(targets, rng)),
        }
    }
}

fn draw_cst_target(targets: &[ColorSpace], rng: &mut SeededRng) -> ColorSpace {
    targets[rng.random_range(0..targets.len())]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Single,
    Sequential,
    Advanced,
}

/// A seeded recipe for the degradation operator applied before masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationPlan {
    pub steps: Vec<DegradationStep>,
    pub composition: Composition,
    pub skip_prob: f64,
    pub max_order: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl DegradationPlan {
    pub const DEFAULT_SKIP_PROB: f64 = 0.3;
    pub const DEFAULT_MAX_ORDER: usize = 2;

    /// Random crop only.
    pub fn crop_only(crop_size: usize, seed: u64) -> Self {
        DegradationPlan {
            steps: Vec::new(),
            composition: Composition::Sequential,
            skip_prob: Self::DEFAULT_SKIP_PROB,
            max_order: Self::DEFAULT_MAX_ORDER,
            crop_size,
            seed,
        }
    }

    pub fn single(step: DegradationStep, crop_size: usize, seed: u64) -> Self {
        DegradationPlan {
            steps: vec![step],
            composition: Composition::Single,
            ..Self::crop_only(crop_size, seed)
        }
    }

    pub fn sequential(steps: Vec<DegradationStep>, crop_size: usize, seed: u64) -> Self {
        DegradationPlan {
            steps,
            ..Self::crop_only(crop_size, seed)
        }
    }

    pub fn advanced(steps: Vec<DegradationStep>, crop_size: usize, seed: u64) -> Self {
        DegradationPlan {
            steps,
            composition: Composition::Advanced,
            ..Self::crop_only(crop_size, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DegradationPlan { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::param("crop_size", "must be positive"));
        }
        if self.composition == Composition::Single && self.steps.len() != 1 {
            return Err(Error::param("steps", "single composition needs exactly one step"));
        }
        if self.composition == Composition::Advanced {
            if !(0.0..=1.0).contains(&self.skip_prob) {
                return Err(Error::param("skip_prob", "must lie in [0, 1]"));
            }
            if self.max_order == 0 {
                return Err(Error::param("max_order", "must be at least 1"));
            }
        }
        self.steps.iter().try_for_each(DegradationStep::validate)
    }
}

/// Applies `plan` to `img` and finishes with a random crop.
///
/// Steps operate in RGB. A color-space transformation selected anywhere in
/// the realized chain is applied once after the other steps, so later RGB-only
/// steps (resize, jitter) stay well-defined; with several, the last one drawn
/// wins.
pub fn compose(img: &Image, plan: &DegradationPlan) -> Result<Image> {
    plan.validate()?;
    require_rgb(img, "compose")?;
    let mut rng = rng::seeded(plan.seed);
    let chain: Vec<&DegradationStep> = match plan.composition {
        Composition::Single | Composition::Sequential => plan.steps.iter().collect(),
        Composition::Advanced => {
            let order = rng.random_range(1..=plan.max_order);
            let mut chain = Vec::new();
            for _ in 0..order {
                let mut round: Vec<&DegradationStep> = plan.steps.iter().collect();
                round.shuffle(&mut rng);
                for step in round {
                    if rng.random::<f64>() >= plan.skip_prob {
                        chain.push(step);
                    }
                }
            }
            chain
        }
    };
    let mut out = img.clone();
    let mut cst_target = None;
    for step in chain {
        if let DegradationStep::Cst { targets } = step {
            cst_target = Some(draw_cst_target(targets, &mut rng));
        } else {
            out = step.apply(&out, &mut rng)?;
        }
    }
    if let Some(target) = cst_target {
        out = apply_cst(&out, target)?;
    }
    random_crop(&out, plan.crop_size, &mut rng)
}
