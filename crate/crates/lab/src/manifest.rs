//! Line-delimited JSON manifests and file-backed data sources.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qptlab_core::curation::CurationRecord;
use qptlab_core::train::{ImageSource, LabeledSource, Sample};
use qptlab_core::{Error as CoreError, Image};

use crate::io::load_image;

/// Reads one record per non-blank line. Unknown keys are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<CurationRecord>> {
    let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CurationRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        rec.validate().with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[CurationRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Relative record paths are resolved against the manifest's directory.
pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Images listed in a manifest, loaded lazily. A record whose path is a
/// directory is read as a video: its PNG files in name order are the frames.
#[derive(Clone, Debug)]
pub struct FileSource {
    pub root: PathBuf,
    pub records: Vec<CurationRecord>,
}

impl FileSource {
    pub fn open(manifest: &Path) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(FileSource { root, records })
    }

    pub fn path_of(&self, index: usize) -> PathBuf {
        resolve(&self.root, &self.records[index].path)
    }

    fn load_sample(&self, index: usize) -> Result<Sample> {
        let path = self.path_of(index);
        if path.is_dir() {
            let mut frames: Vec<PathBuf> = std::fs::read_dir(&path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            frames.sort();
            let frames = frames.iter().map(|p| load_image(p)).collect::<Result<Vec<Image>>>()?;
            Ok(Sample::Video(frames))
        } else {
            Ok(Sample::Image(load_image(&path)?))
        }
    }
}

fn data_error(e: anyhow::Error) -> CoreError {
    CoreError::Data(format!("{e:#}"))
}

impl ImageSource for FileSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, index: usize) -> String {
        self.records[index].id.clone()
    }

    fn load(&self, index: usize) -> qptlab_core::Result<Image> {
        load_image(&self.path_of(index)).map_err(data_error)
    }
}

impl LabeledSource for FileSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, index: usize) -> String {
        self.records[index].id.clone()
    }

    fn mos(&self, index: usize) -> Option<f64> {
        self.records[index].mos
    }

    fn load(&self, index: usize) -> qptlab_core::Result<Sample> {
        self.load_sample(index).map_err(data_error)
    }
}
