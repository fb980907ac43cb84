//! Namespaced run configuration (`data.*`, `degrade.*`, `model.*`,
//! `pretrain.*`, `finetune.*`, `eval.*` plus a top-level `seed`).
//!
//! Layers apply in order profile defaults, config file, command-line
//! overrides. Every layer goes through the same key check, so a typo in any
//! of them is rejected with near-miss suggestions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use qptlab_core::curation::FilterThresholds;
use qptlab_core::degrade::{Composition, DegradationKind, DegradationPlan, DegradationStep, JitterRanges, ParamRange};
use qptlab_core::metrics::SplitProtocol;
use qptlab_core::model::{DecoderConfig, EncoderConfig, FusionConfig, FusionKind, ProjectionKind};
use qptlab_core::optim::OptimConfig;
use qptlab_core::synth::{MosMap, SynthSpec};
use qptlab_core::train::{FinetuneRun, PretrainRun, Task};
use qptlab_core::ColorSpace;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published hyperparameters at full scale.
    Paper,
    /// Desk-scale defaults that train in minutes on a laptop CPU.
    Toy,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        }
    }
}

/// Where data comes from. Empty paths mean "synthesize with the `synth_*` keys".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Unlabeled images for pretraining.
    pub manifest: String,
    /// Images with `mos` for finetuning and evaluation.
    pub labeled: String,
    /// Dataset cache; falls back to `$QPTV2_CACHE`.
    pub cache_dir: String,
    pub synth_images: usize,
    pub synth_labeled: usize,
    pub synth_size: usize,
    pub detail_level: f64,
    pub severity_range: [f64; 2],
    pub mos_noise: f64,
    /// Curation thresholds.
    pub min_objects: u32,
    pub min_short_side: u32,
    pub min_fc: f64,
    /// Window for the coverage-after-crop statistic; `0` uses whole masks.
    pub fc_crop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeConfig {
    pub composition: Composition,
    pub kinds: Vec<DegradationKind>,
    pub skip_prob: f64,
    pub max_order: usize,
    pub resize_scale: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub sharpen_amount: [f64; 2],
    pub sharpen_sigma: f64,
    pub noise_sigma: [f64; 2],
    pub jitter_brightness: [f64; 2],
    pub jitter_contrast: [f64; 2],
    pub jitter_saturation: [f64; 2],
    pub jitter_hue: [f64; 2],
    pub cst_targets: Vec<ColorSpace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: usize,
    pub input_size: usize,
    pub stage_dims: [usize; 3],
    pub stage_depths: [usize; 3],
    pub heads: usize,
    pub mlp_ratio: usize,
    pub fuse_stages: Vec<usize>,
    pub projection: ProjectionKind,
    pub fusion: FusionKind,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 samples; the applied rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub norm_target: bool,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub resize_short: usize,
    pub crop: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub head_hidden: usize,
    pub freeze_encoder: bool,
    pub rank_weight: f64,
    pub flip: bool,
    pub clips: usize,
    pub clip_len: usize,
    pub t_patch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_splits: usize,
    pub train_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub degrade: DegradeConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

fn range(r: [f64; 2]) -> ParamRange {
    ParamRange::new(r[0], r[1])
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let toy = PretrainRun::toy(0);
        let ft_toy = FinetuneRun::toy(Task::ImageQuality, 0);
        let ft_paper = FinetuneRun::paper(Task::ImageQuality, 0);
        let synth = SynthSpec::new(0, 0, 0);
        let data = DataConfig {
            manifest: String::new(),
            labeled: String::new(),
            cache_dir: String::new(),
            synth_images: 2000,
            synth_labeled: 600,
            synth_size: 72,
            detail_level: synth.detail_level,
            severity_range: synth.severity_range,
            mos_noise: synth.mos_map.noise_sigma,
            min_objects: FilterThresholds::default().min_objects,
            min_short_side: FilterThresholds::default().min_short_side,
            min_fc: FilterThresholds::default().min_fc,
            fc_crop: 0,
        };
        let degrade = DegradeConfig {
            composition: Composition::Single,
            kinds: vec![DegradationKind::Cst],
            skip_prob: DegradationPlan::DEFAULT_SKIP_PROB,
            max_order: DegradationPlan::DEFAULT_MAX_ORDER,
            resize_scale: [0.5, 1.0],
            blur_sigma: [0.1, 2.0],
            sharpen_amount: [0.2, 1.0],
            sharpen_sigma: 1.0,
            noise_sigma: [0.01, 0.1],
            jitter_brightness: [0.8, 1.2],
            jitter_contrast: [0.8, 1.2],
            jitter_saturation: [0.8, 1.2],
            jitter_hue: [-0.05, 0.05],
            cst_targets: ColorSpace::ALL.to_vec(),
        };
        let finetune = |run: &FinetuneRun| FinetuneConfig {
            task: run.task,
            resize_short: run.resize_short,
            crop: run.crop,
            epochs: run.epochs,
            batch_size: run.batch_size,
            lr: run.optim.lr,
            weight_decay: run.optim.weight_decay,
            beta1: run.optim.beta1,
            beta2: run.optim.beta2,
            head_hidden: run.head_hidden,
            freeze_encoder: run.freeze_encoder,
            rank_weight: run.rank_weight,
            flip: run.flip,
            clips: run.clips,
            clip_len: run.clip_len,
            t_patch: run.t_patch,
        };
        let base_pretrain = PretrainConfig {
            mask_ratio: toy.mask_ratio,
            epochs: toy.epochs,
            batch_size: toy.batch_size,
            base_lr: 1.5e-4,
            weight_decay: toy.optim.weight_decay,
            beta1: toy.optim.beta1,
            beta2: toy.optim.beta2,
            warmup_steps: 0,
            min_lr: 0.0,
            clip_norm: 0.0,
            norm_target: false,
            checkpoint_every: 0,
        };
        let eval = EvalConfig { n_splits: 10, train_frac: 0.8 };
        match profile {
            Profile::Toy => RunConfig {
                seed: 0,
                data,
                degrade,
                model: ModelConfig::from_parts(&toy.encoder, &toy.fusion, &toy.decoder),
                pretrain: base_pretrain,
                finetune: finetune(&ft_toy),
                eval,
            },
            Profile::Paper => RunConfig {
                seed: 0,
                data: DataConfig { synth_size: ft_paper.resize_short, ..data },
                degrade,
                // HiViT-T-like widths on a 224 input with 4-pixel stage-1 tokens,
                // giving a 14x14 grid for masking.
                model: ModelConfig {
                    patch: 4,
                    input_size: 224,
                    stage_dims: [96, 192, 384],
                    stage_depths: [1, 1, 10],
                    heads: 6,
                    mlp_ratio: 4,
                    fuse_stages: vec![1, 2],
                    projection: ProjectionKind::Linear,
                    fusion: FusionKind::WeightedPool,
                    decoder_dim: 512,
                    decoder_depth: 8,
                    decoder_heads: 16,
                    decoder_mlp_ratio: 4,
                },
                pretrain: PretrainConfig {
                    epochs: 800,
                    batch_size: 2048,
                    warmup_steps: 0,
                    ..base_pretrain
                },
                finetune: finetune(&ft_paper),
                eval,
            },
        }
    }

    /// Profile defaults, then the file (if any), then `overrides` as
    /// `dotted.key=value` strings.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut layers: Vec<(String, Table)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            layers.push((path.display().to_string(), table));
        }
        layers.push(("command line".into(), overrides_table(overrides)?));
        Self::apply(Self::profile(profile), &layers)
    }

    /// This configuration with `dotted.key=value` overrides applied on top.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::apply(self.clone(), &[("override".into(), overrides_table(overrides)?)])
    }

    fn apply(base: RunConfig, layers: &[(String, Table)]) -> Result<Self> {
        let mut merged = Value::try_from(&base)?;
        let known: Vec<String> = leaf_keys(&merged);
        for (origin, table) in layers {
            let mut errors = Vec::new();
            for (key, value) in flatten(table) {
                if known.iter().any(|k| *k == key) {
                    set_dotted(&mut merged, &key, value);
                } else {
                    errors.push(UnknownKey::new(&key, &known).to_string());
                }
            }
            if !errors.is_empty() {
                bail!(ConfigError(format!("{origin}: {}", errors.join("; "))));
            }
        }
        let cfg: RunConfig = merged.try_into().map_err(|e| ConfigError(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: Result<(), qptlab_core::Error>| r.map_err(|e| anyhow!(ConfigError(e.to_string())));
        check(self.pretrain_run().validate())?;
        check(self.synth_spec(1, 0).validate())?;
        if self.finetune.crop != self.model.input_size {
            bail!(ConfigError(format!(
                "finetune.crop ({}) must equal model.input_size ({})",
                self.finetune.crop, self.model.input_size
            )));
        }
        if self.eval.n_splits == 0 || !(0.0 < self.eval.train_frac && self.eval.train_frac < 1.0) {
            bail!(ConfigError("eval.n_splits must be positive and eval.train_frac in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            patch: m.patch,
            stage_dims: m.stage_dims,
            stage_depths: m.stage_depths,
            heads: m.heads,
            input_size: m.input_size,
            mlp_ratio: m.mlp_ratio,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            fuse_stages: self.model.fuse_stages.clone(),
            projection: self.model.projection,
            fusion: self.model.fusion,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            dim: m.decoder_dim,
            depth: m.decoder_depth,
            heads: m.decoder_heads,
            mlp_ratio: m.decoder_mlp_ratio,
        }
    }

    pub fn step(&self, kind: DegradationKind) -> DegradationStep {
        let d = &self.degrade;
        match kind {
            DegradationKind::Resize => DegradationStep::Resize { scale: range(d.resize_scale) },
            DegradationKind::Blur => DegradationStep::Blur { sigma: range(d.blur_sigma) },
            DegradationKind::Sharpen => DegradationStep::Sharpen {
                amount: range(d.sharpen_amount),
                sigma: d.sharpen_sigma,
            },
            DegradationKind::GaussianNoise => DegradationStep::GaussianNoise { sigma: range(d.noise_sigma) },
            DegradationKind::ColorJitter => DegradationStep::ColorJitter(JitterRanges {
                brightness: range(d.jitter_brightness),
                contrast: range(d.jitter_contrast),
                saturation: range(d.jitter_saturation),
                hue: range(d.jitter_hue),
            }),
            DegradationKind::Cst => DegradationStep::Cst { targets: d.cst_targets.clone() },
        }
    }

    pub fn plan(&self) -> DegradationPlan {
        let d = &self.degrade;
        DegradationPlan {
            steps: d.kinds.iter().map(|&k| self.step(k)).collect(),
            composition: d.composition,
            skip_prob: d.skip_prob,
            max_order: d.max_order,
            crop_size: self.model.input_size,
            seed: self.seed,
        }
    }

    pub fn pretrain_run(&self) -> PretrainRun {
        let p = &self.pretrain;
        PretrainRun {
            plan: self.plan(),
            encoder: self.encoder(),
            fusion: self.fusion(),
            decoder: self.decoder(),
            mask_ratio: p.mask_ratio,
            epochs: p.epochs,
            batch_size: p.batch_size,
            optim: OptimConfig {
                lr: p.base_lr * p.batch_size as f64 / 256.0,
                weight_decay: p.weight_decay,
                beta1: p.beta1,
                beta2: p.beta2,
                warmup_steps: p.warmup_steps,
                min_lr: p.min_lr,
                clip_norm: p.clip_norm,
                ..OptimConfig::default()
            },
            norm_target: p.norm_target,
            checkpoint_every: p.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn finetune_run(&self) -> FinetuneRun {
        let f = &self.finetune;
        FinetuneRun {
            task: f.task,
            resize_short: f.resize_short,
            crop: f.crop,
            epochs: f.epochs,
            batch_size: f.batch_size,
            optim: OptimConfig {
                lr: f.lr,
                weight_decay: f.weight_decay,
                beta1: f.beta1,
                beta2: f.beta2,
                ..OptimConfig::default()
            },
            head_hidden: f.head_hidden,
            freeze_encoder: f.freeze_encoder,
            rank_weight: f.rank_weight,
            flip: f.flip,
            clips: f.clips,
            clip_len: f.clip_len,
            t_patch: f.t_patch,
            seed: self.seed,
        }
    }

    /// Synthetic data spec; `stream` separates the pretraining and labeled sets.
    pub fn synth_spec(&self, n_images: usize, stream: u64) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            n_images,
            size: d.synth_size,
            detail_level: d.detail_level,
            severity_range: d.severity_range,
            mos_map: MosMap { noise_sigma: d.mos_noise, ..MosMap::default() },
            seed: qptlab_core::rng::derive_seed(self.seed, "synth", stream),
        }
    }

    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            min_objects: self.data.min_objects,
            min_short_side: self.data.min_short_side,
            min_fc: self.data.min_fc,
        }
    }

    pub fn split_protocol(&self) -> SplitProtocol {
        SplitProtocol {
            n_splits: self.eval.n_splits,
            train_frac: self.eval.train_frac,
            base_seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The effective configuration as `#`-prefixed lines.
    pub fn header(&self, profile: Profile) -> String {
        let mut out = format!("# effective config (profile {}; precedence flag > file > profile)\n", profile.name());
        for line in self.to_toml().lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn known_keys() -> Vec<String> {
        leaf_keys(&Value::try_from(RunConfig::profile(Profile::Toy)).expect("config serializes"))
    }
}

impl ModelConfig {
    fn from_parts(e: &EncoderConfig, f: &FusionConfig, d: &DecoderConfig) -> Self {
        ModelConfig {
            patch: e.patch,
            input_size: e.input_size,
            stage_dims: e.stage_dims,
            stage_depths: e.stage_depths,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            fuse_stages: f.fuse_stages.clone(),
            projection: f.projection,
            fusion: f.fusion,
            decoder_dim: d.dim,
            decoder_depth: d.depth,
            decoder_heads: d.heads,
            decoder_mlp_ratio: d.mlp_ratio,
        }
    }
}

/// Invalid or unknown configuration; the CLI maps it to a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

struct UnknownKey {
    key: String,
    suggestions: Vec<String>,
}

impl UnknownKey {
    fn new(key: &str, known: &[String]) -> Self {
        let leaf = key.rsplit('.').next().unwrap_or(key);
        let mut scored: Vec<(f64, &String)> = known
            .iter()
            .map(|k| {
                let whole = strsim::normalized_damerau_levenshtein(key, k);
                let same_leaf = k.rsplit('.').next() == Some(leaf);
                (if same_leaf { whole.max(0.9) } else { whole }, k)
            })
            .filter(|(s, _)| *s >= 0.7)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        UnknownKey {
            key: key.into(),
            suggestions: scored.into_iter().take(3).map(|(_, k)| k.clone()).collect(),
        }
    }
}

impl fmt::Display for UnknownKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown key `{}`", self.key)?;
        if !self.suggestions.is_empty() {
            write!(f, " (did you mean {}?)", self.suggestions.iter().map(|s| format!("`{s}`")).collect::<Vec<_>>().join(", "))?;
        }
        Ok(())
    }
}

/// Leaves of a table as dotted keys; arrays count as leaves.
fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    for (k, v) in table {
        walk(k, v, &mut out);
    }
    out
}

fn leaf_keys(v: &Value) -> Vec<String> {
    match v {
        Value::Table(t) => flatten(t).into_keys().collect(),
        _ => Vec::new(),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(*p))
            .expect("known keys have their parent tables");
    }
    cur.as_table_mut()
        .expect("parent is a table")
        .insert(parts[parts.len() - 1].to_string(), value);
}

fn overrides_table(overrides: &[String]) -> Result<Table> {
    let mut table = Table::new();
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!(ConfigError(format!("override {o:?} must look like key=value"))))?;
        insert_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    Ok(table)
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ConfigError(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!(ConfigError(format!("{key}: {p} is not a table"))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a command-line value as TOML, falling back to a bare string.
/// `[a, b]` with bare words becomes an array of strings.
pub fn parse_value(raw: &str) -> Value {
    if let Ok(t) = toml::from_str::<Table>(&format!("v = {raw}")) {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if let Some(inner) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let items = inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_value)
            .collect();
        return Value::Array(items);
    }
    Value::String(raw.to_string())
}
