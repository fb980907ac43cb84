//! Synthetic benchmarks on disk: images plus a manifest with `mos`.

use std::path::{Path, PathBuf};

use anyhow::Result;
use qptlab_core::curation::CurationRecord;
use qptlab_core::synth::{item_id, synth_item, synth_mos, synth_video, SynthSpec};
use qptlab_core::train::{ImageSource, LabeledSource, Sample};
use qptlab_core::Image;
use sha2::{Digest, Sha256};

use crate::io::save_image;
use crate::manifest::write_manifest;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
const COMPLETE: &str = ".complete";

/// Writes `images/<id>.png` for every item and `manifest.jsonl` with paths
/// relative to `out_dir`. Re-running with the same spec rewrites identical bytes.
pub fn build_manifest(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let item = synth_item(spec, i)?;
        let rel = format!("images/{}.png", item.id);
        save_image(&item.image, &out_dir.join(&rel))?;
        records.push(item.record(rel));
    }
    let path = out_dir.join(MANIFEST_NAME);
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Video variant: each record's path is a directory of `frame-NNN.png`.
pub fn build_video_manifest(spec: &SynthSpec, frames: usize, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let id = item_id(i);
        let (clip, mos) = synth_video(spec, i, frames)?;
        let rel = format!("videos/{id}");
        for (t, frame) in clip.iter().enumerate() {
            save_image(frame, &out_dir.join(&rel).join(format!("frame-{t:03}.png")))?;
        }
        records.push(CurationRecord {
            id,
            path: rel,
            width: spec.size as u32,
            height: spec.size as u32,
            object_count: 0,
            fg_mask_path: None,
            fc: None,
            mos: Some(mos),
        });
    }
    let path = out_dir.join(MANIFEST_NAME);
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Content key of a spec: its JSON form hashed.
pub fn spec_key(spec: &SynthSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// The manifest for `spec` under `cache_dir`, built on first use.
pub fn cached_manifest(spec: &SynthSpec, cache_dir: &Path) -> Result<PathBuf> {
    let dir = cache_dir.join(format!("synth-{}", spec_key(spec)));
    let path = dir.join(MANIFEST_NAME);
    if dir.join(COMPLETE).exists() && path.exists() {
        log::info!("using cached synthetic set {}", dir.display());
        return Ok(path);
    }
    log::info!("building synthetic set of {} images in {}", spec.n_images, dir.display());
    let path = build_manifest(spec, &dir)?;
    std::fs::write(dir.join(COMPLETE), b"")?;
    Ok(path)
}

/// Synthetic items generated on demand instead of held in memory.
/// `frames > 0` yields videos of that length.
#[derive(Clone, Debug)]
pub struct SynthSource {
    pub spec: SynthSpec,
    pub frames: usize,
}

impl SynthSource {
    pub fn images(spec: SynthSpec) -> Self {
        SynthSource { spec, frames: 0 }
    }

    pub fn videos(spec: SynthSpec, frames: usize) -> Self {
        SynthSource { spec, frames }
    }
}

impl ImageSource for SynthSource {
    fn len(&self) -> usize {
        self.spec.n_images
    }

    fn id(&self, index: usize) -> String {
        item_id(index)
    }

    fn load(&self, index: usize) -> qptlab_core::Result<Image> {
        Ok(synth_item(&self.spec, index)?.image)
    }
}

impl LabeledSource for SynthSource {
    fn len(&self) -> usize {
        self.spec.n_images
    }

    fn id(&self, index: usize) -> String {
        item_id(index)
    }

    fn mos(&self, index: usize) -> Option<f64> {
        Some(synth_mos(&self.spec, index))
    }

    fn load(&self, index: usize) -> qptlab_core::Result<Sample> {
        if self.frames == 0 {
            Ok(Sample::Image(synth_item(&self.spec, index)?.image))
        } else {
            Ok(Sample::Video(synth_video(&self.spec, index, self.frames)?.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::read_manifest;

    #[test]
    fn manifest_lists_every_image() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(10, 24, 3);
        let path = build_manifest(&spec, dir.path()).unwrap();
        let recs = read_manifest(&path).unwrap();
        assert_eq!(recs.len(), 10);
        for r in &recs {
            assert!(dir.path().join(&r.path).is_file());
            assert!(r.mos.is_some());
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(4, 16, 8);
        let pa = build_manifest(&spec, a.path()).unwrap();
        let pb = build_manifest(&spec, b.path()).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        assert_eq!(
            std::fs::read(a.path().join("images/synth-00002.png")).unwrap(),
            std::fs::read(b.path().join("images/synth-00002.png")).unwrap()
        );
    }

    #[test]
    fn cache_is_keyed_by_spec() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = cached_manifest(&SynthSpec::new(2, 16, 1), dir.path()).unwrap();
        let p2 = cached_manifest(&SynthSpec::new(2, 16, 1), dir.path()).unwrap();
        let p3 = cached_manifest(&SynthSpec::new(2, 16, 2), dir.path()).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
    }

    #[test]
    fn videos_are_frame_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = build_video_manifest(&SynthSpec::new(2, 16, 1), 3, dir.path()).unwrap();
        let recs = read_manifest(&path).unwrap();
        assert!(dir.path().join(&recs[1].path).join("frame-002.png").is_file());
    }
}
