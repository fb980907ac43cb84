//! Checkpoint directories: `manifest.json` (configuration echo, seed, step,
//! parameter table, checksum) and `params.bin` (little-endian f64 values of
//! every parameter in canonical order).

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use qptlab_core::model::{build_autoencoder, DecoderConfig, EncoderConfig, FusionConfig, Model};
use qptlab_core::params::ParamStore;
use qptlab_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "qptlab-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    pub step: usize,
    /// Hidden width of the scoring head, if one is attached.
    pub head_hidden: Option<usize>,
    /// Hex FNV-1a checksum of names, shapes and values.
    pub checksum: String,
    pub params: Vec<ParamEntry>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn head_hidden(model: &Model) -> Option<usize> {
    model
        .params
        .id("head.fc1.weight")
        .map(|id| model.params.get(id).cols())
}

pub fn save(dir: &Path, model: &Model, step: usize, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        encoder: model.encoder.clone(),
        fusion: model.fusion.clone(),
        decoder: model.decoder.clone(),
        seed: model.seed,
        step,
        head_hidden: head_hidden(model),
        checksum: format!("{:016x}", model.checksum()),
        params: model
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.into(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        config,
    };
    let mut bytes = Vec::with_capacity(model.num_params() * 8);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(PARAMS), bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: CheckpointManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(m.format == FORMAT, "unsupported checkpoint format {:?}", m.format);
    Ok(m)
}

/// Rebuilds the model skeleton from the manifest and fills in the stored
/// values. Fails on any name, shape, size or checksum mismatch.
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let mut skeleton = build_autoencoder(&m.encoder, &m.fusion, &m.decoder, m.seed)?;
    if let Some(hidden) = m.head_hidden {
        skeleton.attach_head(hidden, 0);
    }
    let bytes = std::fs::read(dir.join(PARAMS)).with_context(|| format!("reading {}", dir.join(PARAMS).display()))?;
    let expected: usize = m.params.iter().map(|p| p.rows * p.cols).sum();
    ensure!(bytes.len() == expected * 8, "params.bin holds {} bytes, manifest expects {}", bytes.len(), expected * 8);
    let mut store = ParamStore::new();
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for p in &m.params {
        let data: Vec<f64> = values.by_ref().take(p.rows * p.cols).collect();
        store.add(&p.name, Tensor::from_vec(p.rows, p.cols, data));
    }
    let model = skeleton.with_params(store)?;
    let sum = format!("{:016x}", model.checksum());
    if sum != m.checksum {
        bail!("checksum mismatch: manifest {} vs data {}", m.checksum, sum);
    }
    Ok((model, m))
}
