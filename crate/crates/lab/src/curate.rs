//! Manifest curation with coverage taken from stored binary masks.

use std::path::Path;

use anyhow::Result;
use qptlab_core::curation::{
    centered_crop_coverage, filter_manifest, foreground_coverage, manifest_stats, CurationRecord, FilterThresholds,
    ManifestStats,
};

use crate::io::load_mask;
use crate::manifest::resolve;

/// Fills missing `fc` values from `fg_mask_path`. With `crop > 0` the
/// coverage is measured over the centered `crop×crop` window instead, as an
/// approximation of coverage after random cropping.
pub fn fill_coverage(records: &mut [CurationRecord], root: &Path, crop: usize) -> Result<()> {
    for r in records.iter_mut() {
        let Some(mask_path) = &r.fg_mask_path else { continue };
        if r.fc.is_some() && crop == 0 {
            continue;
        }
        let (mask, h, w) = load_mask(&resolve(root, mask_path))?;
        r.fc = Some(if crop == 0 {
            foreground_coverage(&mask)?
        } else {
            centered_crop_coverage(&mask, h, w, crop)?
        });
    }
    Ok(())
}

pub struct Curated {
    pub kept: Vec<CurationRecord>,
    pub input_stats: ManifestStats,
    pub kept_stats: Option<ManifestStats>,
}

pub fn curate(records: &[CurationRecord], root: &Path, thresholds: &FilterThresholds, crop: usize) -> Result<Curated> {
    let mut with_fc = records.to_vec();
    fill_coverage(&mut with_fc, root, 0)?;
    let kept = filter_manifest(&with_fc, thresholds);
    let mut stat_view = with_fc.clone();
    let mut kept_view = kept.clone();
    if crop > 0 {
        fill_coverage(&mut stat_view, root, crop)?;
        fill_coverage(&mut kept_view, root, crop)?;
    }
    Ok(Curated {
        input_stats: manifest_stats(&stat_view)?,
        kept_stats: if kept_view.is_empty() { None } else { Some(manifest_stats(&kept_view)?) },
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma};

    fn rec(id: &str, objects: u32, mask: Option<&str>) -> CurationRecord {
        CurationRecord {
            id: id.into(),
            path: format!("{id}.png"),
            width: 4,
            height: 4,
            object_count: objects,
            fg_mask_path: mask.map(Into::into),
            fc: None,
            mos: None,
        }
    }

    #[test]
    fn coverage_comes_from_masks() {
        let dir = tempfile::tempdir().unwrap();
        // 4x4 mask, foreground in the middle 2x2 block
        let data: Vec<u8> = (0..16).map(|i| u8::from(matches!(i, 5 | 6 | 9 | 10)) * 255).collect();
        ImageBuffer::<Luma<u8>, _>::from_raw(4, 4, data).unwrap().save(dir.path().join("m.png")).unwrap();
        let records = vec![rec("a", 60, Some("m.png")), rec("b", 10, None)];
        let out = curate(&records, dir.path(), &FilterThresholds { min_fc: 0.2, ..Default::default() }, 0).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].fc, Some(0.25));
        assert_eq!(out.input_stats.fc_count, 1);

        let cropped = curate(&records, dir.path(), &FilterThresholds::default(), 2).unwrap();
        assert_eq!(cropped.kept_stats.unwrap().fc_histogram[9], 1);
    }
}
