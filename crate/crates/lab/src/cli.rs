//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qptlab_core::degrade::{compose, DegradationKind, DegradationPlan};
use qptlab_core::spectrum::radial_spectrum;
use qptlab_core::train::Task;
use serde::Serialize;

use crate::bench::{build_manifest, build_video_manifest};
use crate::checkpoint;
use crate::config::{ConfigError, Profile, RunConfig};
use crate::curate::curate;
use crate::manifest::{read_manifest, write_manifest};
use crate::pipeline::{self, Predictor};
use crate::report::write_json;

#[derive(Debug, Parser)]
#[command(name = "qptlab", version, about = "Degradation-augmented masked image modeling lab for visual scoring")]
pub struct Cli {
    /// TOML file with namespaced keys (data.*, degrade.*, model.*, pretrain.*, finetune.*, eval.*).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Default values to start from.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Toy)]
    pub profile: Profile,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a manifest by object count, resolution and foreground coverage; write stats.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        min_objects: Option<u32>,
        #[arg(long)]
        min_short_side: Option<u32>,
        #[arg(long)]
        min_fc: Option<f64>,
        /// Measure coverage statistics over a centered crop of this size.
        #[arg(long)]
        fc_crop: Option<usize>,
    },
    /// Write a synthetic benchmark (images + manifest with mos).
    Synth {
        /// Number of items; defaults to data.synth_images or data.synth_labeled.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        detail: Option<f64>,
        /// Which seed stream to draw from: the pretraining set or the labeled set.
        #[arg(long, value_enum, default_value_t = Stream::Labeled)]
        stream: Stream,
        /// Write videos with this many frames instead of still images.
        #[arg(long)]
        video_frames: Option<usize>,
    },
    /// Masked reconstruction pretraining.
    Pretrain {
        /// Unlabeled images; synthbench images when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finetune a scoring head on labeled samples.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// SRCC/PLCC evaluation.
    ///
    /// With a finetuned checkpoint, scores every labeled item. With a
    /// pretrained checkpoint, runs the repeated 80/20 split protocol,
    /// finetuning on each training split. `--predictor identity|hf-energy`
    /// runs the protocol with a fixed predictor.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Option<FixedPredictor>,
    },
    /// Sweep one config key and tabulate mean SRCC/PLCC per value.
    Ablate {
        /// `key=v1,v2,...`, e.g. `mask_ratio=0.3,0.6,0.75,0.9` or `degrade.kinds=[blur],[cst]`.
        #[arg(long)]
        grid: String,
    },
    /// Mean radially averaged log spectra per degradation kind.
    Spectrum {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated kinds; all six when omitted.
        #[arg(long)]
        kinds: Option<String>,
        /// Images to average over.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Stream {
    Pretrain,
    Labeled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixedPredictor {
    Identity,
    HfEnergy,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).ok_or_else(|| format!("unknown task {s:?}; expected image_quality, aesthetics or video_quality"))
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for
/// usage and configuration errors, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
                2
            } else {
                1
            }
        }
    }
}

fn command_overrides(cmd: &Command) -> Vec<String> {
    let mut o = Vec::new();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{key}={v}"));
        }
    };
    match cmd {
        Command::Curate { min_objects, min_short_side, min_fc, fc_crop, .. } => {
            push("data.min_objects", min_objects.map(|v| v.to_string()));
            push("data.min_short_side", min_short_side.map(|v| v.to_string()));
            push("data.min_fc", min_fc.map(|v| format!("{v:?}")));
            push("data.fc_crop", fc_crop.map(|v| v.to_string()));
        }
        Command::Synth { size, detail, .. } => {
            push("data.synth_size", size.map(|v| v.to_string()));
            push("data.detail_level", detail.map(|v| format!("{v:?}")));
        }
        Command::Pretrain { epochs, .. } => push("pretrain.epochs", epochs.map(|v| v.to_string())),
        Command::Finetune { task, epochs, .. } => {
            push("finetune.task", task.map(|t| format!("{:?}", t.name())));
            push("finetune.epochs", epochs.map(|v| v.to_string()));
        }
        Command::Eval { .. } | Command::Ablate { .. } | Command::Spectrum { .. } => {}
    }
    o
}

/// Profile, then file, then `--set`, then dedicated flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(command_overrides(&cli.command));
    RunConfig::resolve(cli.profile, cli.config.as_deref(), &overrides)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for line in cfg.header(cli.profile).lines() {
        log::info!("{line}");
    }
    std::fs::write(out.join("effective_config.toml"), cfg.header(cli.profile) + &cfg.to_toml())?;
    match &cli.command {
        Command::Curate { manifest, .. } => cmd_curate(&cfg, manifest, out),
        Command::Synth { n, stream, video_frames, .. } => cmd_synth(&cfg, *n, *stream, *video_frames, out),
        Command::Pretrain { manifest, .. } => {
            let source = pipeline::pretrain_source(&cfg, manifest.as_deref())?;
            let outcome = pipeline::run_pretrain(&cfg, source.as_ref(), out)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            println!("pretrained {} steps, final loss {last:.5}, checksum {:016x}", outcome.log.len(), outcome.model.checksum());
            Ok(())
        }
        Command::Finetune { checkpoint: ckpt, manifest, .. } => {
            let (model, _) = checkpoint::load(ckpt)?;
            if model.has_head() {
                bail!("checkpoint {} already has a scoring head", ckpt.display());
            }
            let source = pipeline::labeled_source(&cfg, manifest.as_deref())?;
            let all: Vec<usize> = (0..source.len()).collect();
            let outcome = pipeline::run_finetune(&cfg, &model, source.as_ref(), &all, out)?;
            println!("finetuned {} steps on {} items", outcome.log.len(), all.len());
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, manifest, predictor } => cmd_eval(&cfg, ckpt.as_deref(), manifest.as_deref(), *predictor, out),
        Command::Ablate { grid } => {
            let (key, values) = grid
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--grid {grid:?} must look like key=v1,v2,...")))?;
            let values = pipeline::grid_values(values);
            if values.is_empty() {
                bail!(ConfigError("--grid needs at least one value".into()));
            }
            let ablation = pipeline::ablate(&cfg, key.trim(), &values, out)?;
            let md = ablation.to_markdown();
            std::fs::write(out.join("ablation.md"), &md)?;
            write_json(&out.join("ablation.json"), &ablation)?;
            print!("{md}");
            Ok(())
        }
        Command::Spectrum { manifest, kinds, n } => cmd_spectrum(&cfg, manifest.as_deref(), kinds.as_deref(), *n, out),
    }
}

fn cmd_curate(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let records = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let curated = curate(&records, root, &cfg.thresholds(), cfg.data.fc_crop)?;
    write_manifest(&out.join("filtered.jsonl"), &curated.kept)?;
    write_json(&out.join("input_stats.json"), &curated.input_stats)?;
    match &curated.kept_stats {
        Some(s) => write_json(&out.join("stats.json"), s)?,
        None => log::warn!("no records passed the filter; stats.json not written"),
    }
    println!("kept {} of {} records", curated.kept.len(), records.len());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, n: Option<usize>, stream: Stream, frames: Option<usize>, out: &Path) -> Result<()> {
    let (default_n, stream_id) = match stream {
        Stream::Pretrain => (cfg.data.synth_images, 0),
        Stream::Labeled => (cfg.data.synth_labeled, 1),
    };
    let spec = cfg.synth_spec(n.unwrap_or(default_n), stream_id);
    let path = match frames {
        Some(f) => build_video_manifest(&spec, f, out)?,
        None => build_manifest(&spec, out)?,
    };
    println!("wrote {} items to {}", spec.n_images, path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    all: Option<pipeline::Correlations>,
    #[serde(skip_serializing_if = "Option::is_none")]
    protocol: Option<qptlab_core::metrics::SplitReport>,
}

fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, manifest: Option<&Path>, fixed: Option<FixedPredictor>, out: &Path) -> Result<()> {
    let source = pipeline::labeled_source(cfg, manifest)?;
    let (report, md) = match (ckpt, fixed) {
        (Some(_), Some(_)) => bail!(ConfigError("use either --checkpoint or --predictor, not both".into())),
        (None, None) => bail!(ConfigError("eval needs --checkpoint or --predictor".into())),
        (Some(dir), None) => {
            let (model, _) = checkpoint::load(dir)?;
            if model.has_head() {
                let all: Vec<usize> = (0..source.len()).collect();
                let c = pipeline::correlations(&pipeline::score_table(cfg, &Predictor::Model(&model), source.as_ref(), &all)?)?;
                let md = qptlab_core::metrics::render_table("Model", &[("finetuned".into(), c.srcc, c.plcc)]);
                (EvalReport { mode: "checkpoint", all: Some(c), protocol: None }, md)
            } else {
                let r = pipeline::split_protocol(cfg, Some(&model), None, source.as_ref())?;
                let md = r.to_markdown("pretrained + finetune");
                (EvalReport { mode: "split_protocol", all: None, protocol: Some(r) }, md)
            }
        }
        (None, Some(p)) => {
            let (pred, label) = match p {
                FixedPredictor::Identity => (Predictor::Identity, "identity"),
                FixedPredictor::HfEnergy => (Predictor::HfEnergy, "hf-energy"),
            };
            let r = pipeline::split_protocol(cfg, None, Some(&pred), source.as_ref())?;
            let md = r.to_markdown(label);
            (EvalReport { mode: "split_protocol", all: None, protocol: Some(r) }, md)
        }
    };
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct SpectrumEntry {
    kind: String,
    /// Mean log-magnitude per radial bin; bin 0 is the DC term.
    mean_log_magnitude: Vec<f64>,
}

fn cmd_spectrum(cfg: &RunConfig, manifest: Option<&Path>, kinds: Option<&str>, n: usize, out: &Path) -> Result<()> {
    let kinds: Vec<DegradationKind> = match kinds {
        None => DegradationKind::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|k| DegradationKind::parse(k.trim()).ok_or_else(|| ConfigError(format!("unknown degradation kind {k:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let source = pipeline::pretrain_source(cfg, manifest)?;
    let count = n.min(source.len());
    if count == 0 {
        bail!("no images to profile");
    }
    let size = cfg.model.input_size;
    let mut entries = Vec::new();
    let mut variants: Vec<(String, Option<DegradationKind>)> = vec![("clean".into(), None)];
    variants.extend(kinds.iter().map(|k| (k.name().to_string(), Some(*k))));
    for (label, kind) in variants {
        let mut sum: Vec<f64> = Vec::new();
        for i in 0..count {
            let img = source.load(i)?;
            let seed = qptlab_core::rng::derive_seed(cfg.seed, &source.id(i), 0);
            let plan = match kind {
                Some(k) => DegradationPlan::single(cfg.step(k), size, seed),
                None => DegradationPlan::crop_only(size, seed),
            };
            let profile = radial_spectrum(&compose(&img, &plan)?)?;
            if sum.is_empty() {
                sum = vec![0.0; profile.bins.len()];
            }
            for (s, b) in sum.iter_mut().zip(&profile.bins) {
                *s += b.log_magnitude;
            }
        }
        entries.push(SpectrumEntry {
            kind: label,
            mean_log_magnitude: sum.into_iter().map(|s| s / count as f64).collect(),
        });
    }
    let mut md = String::from("| Degradation | Low | Mid | High |\n|---|---|---|---|\n");
    for e in &entries {
        let bands = &e.mean_log_magnitude[1..];
        let third = bands.len() / 3;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        md.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} |\n",
            e.kind,
            mean(&bands[..third]),
            mean(&bands[third..2 * third]),
            mean(&bands[2 * third..])
        ));
    }
    write_json(&out.join("spectrum.json"), &entries)?;
    std::fs::write(out.join("spectrum.md"), &md)?;
    print!("{md}");
    Ok(())
}
