//! Foreground coverage and manifest filtering by resolution and object count.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One manifest entry. Masks and object counts come precomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub object_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
}

impl CurationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data(alloc::format!("record {}: zero dimension", self.id)));
        }
        if let Some(fc) = self.fc {
            if !(0.0..=1.0).contains(&fc) {
                return Err(Error::Data(alloc::format!("record {}: fc {fc} outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }

    pub fn short_side(&self) -> u32 {
        self.width.min(self.height)
    }
}

/// Fraction of foreground pixels in a binary mask.
pub fn foreground_coverage(mask: &[u8]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::param("mask", "empty mask"));
    }
    let mut ones = 0usize;
    for &v in mask {
        match v {
            0 => {}
            1 => ones += 1,
            _ => return Err(Error::param("mask", "values must be 0 or 1")),
        }
    }
    Ok(ones as f64 / mask.len() as f64)
}

/// Coverage of the centered `crop×crop` window of a row-major `height×width`
/// mask. Approximates coverage after random cropping.
pub fn centered_crop_coverage(mask: &[u8], height: usize, width: usize, crop: usize) -> Result<f64> {
    if mask.len() != height * width {
        return Err(Error::param("mask", "length must equal height*width"));
    }
    let ch = crop.min(height);
    let cw = crop.min(width);
    let top = (height - ch) / 2;
    let left = (width - cw) / 2;
    let window: Vec<u8> = (top..top + ch)
        .flat_map(|y| mask[y * width + left..y * width + left + cw].iter().copied())
        .collect();
    foreground_coverage(&window)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_objects: u32,
    pub min_short_side: u32,
    pub min_fc: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_objects: 50,
            min_short_side: 0,
            min_fc: 0.0,
        }
    }
}

impl FilterThresholds {
    pub fn keeps(&self, r: &CurationRecord) -> bool {
        r.object_count >= self.min_objects
            && r.short_side() >= self.min_short_side
            && r.fc.is_none_or(|fc| fc >= self.min_fc)
    }
}

/// Order-preserving filter: enough objects, a long enough short side, and
/// (when known) enough foreground coverage.
pub fn filter_manifest(records: &[CurationRecord], thresholds: &FilterThresholds) -> Vec<CurationRecord> {
    records.iter().filter(|r| thresholds.keeps(r)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub count: usize,
    pub mean_width: f64,
    pub mean_height: f64,
    /// Ten equal-width bins over `[0, 1]`; `fc = 1` falls in the last bin.
    pub fc_histogram: [u64; 10],
    /// Records contributing to the histogram.
    pub fc_count: usize,
    pub object_count_quantiles: Quantiles,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn manifest_stats(records: &[CurationRecord]) -> Result<ManifestStats> {
    if records.is_empty() {
        return Err(Error::param("records", "statistics need at least one record"));
    }
    let n = records.len() as f64;
    let mut fc_histogram = [0u64; 10];
    let mut fc_count = 0;
    for fc in records.iter().filter_map(|r| r.fc) {
        fc_histogram[(libm::floor(fc * 10.0) as usize).min(9)] += 1;
        fc_count += 1;
    }
    let mut objects: Vec<f64> = records.iter().map(|r| f64::from(r.object_count)).collect();
    objects.sort_by(f64::total_cmp);
    Ok(ManifestStats {
        count: records.len(),
        mean_width: records.iter().map(|r| f64::from(r.width)).sum::<f64>() / n,
        mean_height: records.iter().map(|r| f64::from(r.height)).sum::<f64>() / n,
        fc_histogram,
        fc_count,
        object_count_quantiles: Quantiles {
            min: objects[0],
            p25: quantile(&objects, 0.25),
            median: quantile(&objects, 0.5),
            p75: quantile(&objects, 0.75),
            max: objects[objects.len() - 1],
        },
    })
}
