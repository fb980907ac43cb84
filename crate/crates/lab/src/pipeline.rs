//! End-to-end operations shared by the CLI and the acceptance tests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qptlab_core::metrics::{plcc, render_table, run_split_protocol, srcc, ScoreTable, SplitReport};
use qptlab_core::model::Model;
use qptlab_core::synth::high_frequency_energy;
use qptlab_core::train::{
    finetune, predict, pretrain, FinetuneOutcome, ImageSource, LabeledSource, Observer, PretrainOutcome, Quiet, Sample,
    Task,
};
use serde::Serialize;

use crate::bench::{cached_manifest, SynthSource};
use crate::config::RunConfig;
use crate::manifest::FileSource;
use crate::report::JsonlLog;

pub const CACHE_ENV: &str = "QPTV2_CACHE";

/// `data.cache_dir`, else `$QPTV2_CACHE`, else none (synthesize lazily).
pub fn cache_dir(cfg: &RunConfig) -> Option<PathBuf> {
    if !cfg.data.cache_dir.is_empty() {
        return Some(PathBuf::from(&cfg.data.cache_dir));
    }
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn pick(flag: Option<&Path>, key: &str) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| (!key.is_empty()).then(|| PathBuf::from(key)))
}

/// Pretraining images: a manifest if one is given, otherwise synthbench
/// images (cached on disk when a cache directory is configured).
pub fn pretrain_source(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Box<dyn ImageSource>> {
    if let Some(path) = pick(manifest, &cfg.data.manifest) {
        return Ok(Box::new(FileSource::open(&path)?));
    }
    let spec = cfg.synth_spec(cfg.data.synth_images, 0);
    Ok(match cache_dir(cfg) {
        Some(dir) => Box::new(FileSource::open(&cached_manifest(&spec, &dir)?)?),
        None => Box::new(SynthSource::images(spec)),
    })
}

/// Labeled samples: a manifest if given, otherwise a synthbench set drawn
/// from a different stream than the pretraining images.
pub fn labeled_source(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Box<dyn LabeledSource>> {
    if let Some(path) = pick(manifest, &cfg.data.labeled) {
        return Ok(Box::new(FileSource::open(&path)?));
    }
    let spec = cfg.synth_spec(cfg.data.synth_labeled, 1);
    if cfg.finetune.task == Task::VideoQuality {
        return Ok(Box::new(SynthSource::videos(spec, 2 * cfg.finetune.clip_len)));
    }
    Ok(match cache_dir(cfg) {
        Some(dir) => Box::new(FileSource::open(&cached_manifest(&spec, &dir)?)?),
        None => Box::new(SynthSource::images(spec)),
    })
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Pretrains and writes `train_log.jsonl` and `checkpoint/` under `out`.
pub fn run_pretrain(cfg: &RunConfig, source: &dyn ImageSource, out: &Path) -> Result<PretrainOutcome> {
    let run = cfg.pretrain_run();
    let mut log = JsonlLog::create(&out.join("train_log.jsonl"))?.with_checkpoints(&out.join("checkpoints"), config_json(cfg));
    let outcome = pretrain(&run, source, &mut log).context("pretraining")?;
    log.finish()?;
    let steps = outcome.log.last().map_or(0, |r| r.step + 1);
    crate::checkpoint::save(&out.join("checkpoint"), &outcome.model, steps, config_json(cfg))?;
    if outcome.skipped > 0 {
        log::warn!("{} unreadable images were skipped", outcome.skipped);
    }
    Ok(outcome)
}

/// Finetunes on `indices` and writes the log and checkpoint under `out`.
pub fn run_finetune(
    cfg: &RunConfig,
    pretrained: &Model,
    source: &dyn LabeledSource,
    indices: &[usize],
    out: &Path,
) -> Result<FinetuneOutcome> {
    let run = cfg.finetune_run();
    let mut log = JsonlLog::create(&out.join("train_log.jsonl"))?;
    let outcome = finetune(pretrained, &run, source, indices, &mut log).context("finetuning")?;
    log.finish()?;
    crate::checkpoint::save(&out.join("checkpoint"), &outcome.model, outcome.log.len(), config_json(cfg))?;
    Ok(outcome)
}

/// How scores are produced during evaluation.
pub enum Predictor<'a> {
    /// A model with a scoring head, using the task's test-time protocol.
    Model(&'a Model),
    /// The label itself: a perfect predictor.
    Identity,
    /// Negated high-frequency log-energy of the image (first frame for videos).
    HfEnergy,
}

pub fn score(cfg: &RunConfig, predictor: &Predictor, source: &dyn LabeledSource, index: usize) -> Result<f64> {
    match predictor {
        Predictor::Identity => source
            .mos(index)
            .with_context(|| format!("sample {} has no mos", source.id(index))),
        Predictor::Model(model) => Ok(predict(model, &cfg.finetune_run(), &source.load(index)?)?),
        Predictor::HfEnergy => {
            let img = match source.load(index)? {
                Sample::Image(img) => img,
                Sample::Video(frames) => frames.into_iter().next().context("empty video")?,
            };
            let side = img.height().min(img.width());
            Ok(-high_frequency_energy(&img.crop(0, 0, side, side)?)?)
        }
    }
}

pub fn score_table(cfg: &RunConfig, predictor: &Predictor, source: &dyn LabeledSource, indices: &[usize]) -> Result<ScoreTable> {
    let mut pred = Vec::with_capacity(indices.len());
    let mut mos = Vec::with_capacity(indices.len());
    for &i in indices {
        pred.push(score(cfg, predictor, source, i)?);
        mos.push(source.mos(i).with_context(|| format!("sample {} has no mos", source.id(i)))?);
    }
    Ok(ScoreTable::new(pred, mos)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Correlations {
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
}

pub fn correlations(table: &ScoreTable) -> Result<Correlations> {
    Ok(Correlations {
        n: table.len(),
        srcc: srcc(table)?,
        plcc: plcc(table)?,
    })
}

/// The repeated-split protocol. A pretrained model (no head) is finetuned on
/// each training split; fixed predictors skip training.
pub fn split_protocol(
    cfg: &RunConfig,
    pretrained: Option<&Model>,
    fixed: Option<&Predictor>,
    source: &dyn LabeledSource,
) -> Result<SplitReport> {
    let protocol = cfg.split_protocol();
    let run = cfg.finetune_run();
    let report = run_split_protocol(
        source.len(),
        &protocol,
        |k, train| match pretrained {
            Some(m) => {
                log::info!("split {k}: finetuning on {} items", train.len());
                let mut r = run.clone();
                r.seed = qptlab_core::rng::derive_seed(run.seed, "split", k as u64);
                Ok(Some(finetune(m, &r, source, train, &mut Quiet)?.model))
            }
            None => Ok(None),
        },
        |model, test| {
            let p = match (model, fixed) {
                (Some(m), _) => Predictor::Model(m),
                (None, Some(Predictor::Identity)) => Predictor::Identity,
                (None, _) => Predictor::HfEnergy,
            };
            score_table(cfg, &p, source, test).map_err(|e| qptlab_core::Error::Data(format!("{e:#}")))
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub srcc: f64,
    pub plcc: f64,
    pub splits: SplitReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ablation {
    pub key: String,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn to_markdown(&self) -> String {
        let rows: Vec<(String, f64, f64)> = self.rows.iter().map(|r| (r.value.clone(), r.srcc, r.plcc)).collect();
        render_table(&self.key, &rows)
    }
}

/// Short names accepted in `--grid`.
pub fn grid_key(key: &str) -> Result<String> {
    let alias = match key {
        "degradation" | "kinds" => "degrade.kinds",
        other => other,
    };
    let known = RunConfig::known_keys();
    if known.iter().any(|k| k == alias) {
        return Ok(alias.to_string());
    }
    let by_leaf: Vec<&String> = known.iter().filter(|k| k.rsplit('.').next() == Some(alias)).collect();
    match by_leaf.as_slice() {
        [one] => Ok((*one).clone()),
        [] => bail!(crate::config::ConfigError(format!("unknown grid key `{key}`"))),
        many => bail!(crate::config::ConfigError(format!(
            "grid key `{key}` is ambiguous: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Splits `a,b,[c,d]` at top-level commas.
pub fn grid_values(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in raw.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// One pretrain + split-protocol finetune per grid value.
pub fn ablate(cfg: &RunConfig, key: &str, values: &[String], out: &Path) -> Result<Ablation> {
    let key = grid_key(key)?;
    // resolve every cell before training so a bad value fails fast
    let cells = values
        .iter()
        .map(|v| cfg.with_overrides(&[format!("{key}={v}")]).with_context(|| format!("ablation value {key}={v}")))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, (value, cell)) in values.iter().zip(cells).enumerate() {
        log::info!("ablation cell {key} = {value}");
        let dir = out.join(format!("cell-{i}"));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("effective_config.toml"), cell.to_toml())?;
        let source = pretrain_source(&cell, None)?;
        let model = run_pretrain(&cell, source.as_ref(), &dir)?.model;
        let labeled = labeled_source(&cell, None)?;
        let splits = split_protocol(&cell, Some(&model), None, labeled.as_ref())?;
        rows.push(AblationRow {
            value: value.clone(),
            srcc: splits.mean_srcc,
            plcc: splits.mean_plcc,
            splits,
        });
    }
    Ok(Ablation { key, rows })
}

/// Observer that logs at info level only; used where no log file is wanted.
pub struct Progress;

impl Observer for Progress {
    fn on_warning(&mut self, message: &str) {
        log::warn!("{message}");
    }
}
