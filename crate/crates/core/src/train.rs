//! Pretraining and finetuning loops, five-crop testing and clip sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{self, compose, DegradationPlan, DegradationStep};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::masking;
use crate::model::{build_autoencoder, DecoderConfig, EncoderConfig, FusionConfig, Model};
use crate::optim::{AdamW, CosineSchedule, OptimConfig};
use crate::params::Grads;
use crate::rng;

/// Images addressed by index, loaded on demand.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, index: usize) -> String;
    fn load(&self, index: usize) -> Result<Image>;
}

/// A still image or a frame stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Image(Image),
    Video(Vec<Image>),
}

/// Samples with optional opinion scores.
pub trait LabeledSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, index: usize) -> String;
    fn mos(&self, index: usize) -> Option<f64>;
    fn load(&self, index: usize) -> Result<Sample>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub sample: Sample,
    pub mos: Option<f64>,
}

/// In-memory sources.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory<T> {
    pub items: Vec<T>,
}

impl ImageSource for Memory<(String, Image)> {
    fn len(&self) -> usize {
        self.items.len()
    }
    fn id(&self, index: usize) -> String {
        self.items[index].0.clone()
    }
    fn load(&self, index: usize) -> Result<Image> {
        Ok(self.items[index].1.clone())
    }
}

impl LabeledSource for Memory<LabeledItem> {
    fn len(&self) -> usize {
        self.items.len()
    }
    fn id(&self, index: usize) -> String {
        self.items[index].id.clone()
    }
    fn mos(&self, index: usize) -> Option<f64> {
        self.items[index].mos
    }
    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self.items[index].sample.clone())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Progress hooks; all methods default to no-ops.
pub trait Observer {
    fn on_step(&mut self, _record: &LogRecord) {}
    fn on_warning(&mut self, _message: &str) {}
    /// Called every `checkpoint_every` steps during pretraining.
    fn on_checkpoint(&mut self, _model: &Model, _step: usize) -> Result<()> {
        Ok(())
    }
}

pub struct Quiet;

impl Observer for Quiet {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub plan: DegradationPlan,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Normalize each target unit to zero mean and unit variance.
    pub norm_target: bool,
    /// Steps between checkpoint callbacks; `0` disables them.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl PretrainRun {
    /// Desk-scale defaults: toy model, CST-degraded pretraining.
    pub fn toy(seed: u64) -> Self {
        let encoder = EncoderConfig::toy();
        PretrainRun {
            plan: DegradationPlan::single(DegradationStep::Cst { targets: ColorSpace::ALL.to_vec() }, encoder.input_size, seed),
            fusion: FusionConfig {
                fuse_stages: alloc::vec![1, 2],
                projection: crate::model::ProjectionKind::Linear,
                fusion: crate::model::FusionKind::WeightedPool,
            },
            decoder: DecoderConfig::toy(),
            encoder,
            mask_ratio: 0.75,
            epochs: 10,
            batch_size: 16,
            optim: OptimConfig {
                // linear scaling from a base of 1.5e-4 per 256 samples
                lr: 1.5e-4 * 16.0 / 256.0,
                weight_decay: 0.05,
                ..OptimConfig::default()
            },
            norm_target: false,
            checkpoint_every: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        self.optim.validate()?;
        if self.plan.crop_size != self.encoder.input_size {
            return Err(Error::Config(format!(
                "degradation crop {} must equal the model input size {}",
                self.plan.crop_size, self.encoder.input_size
            )));
        }
        let n = self.encoder.coarse_side() * self.encoder.coarse_side();
        let k = masking::masked_count(n, self.mask_ratio);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || k == 0 || k >= n {
            return Err(Error::Config(format!(
                "mask ratio {} masks {k} of {n} units; need at least one masked and one visible",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub skipped: usize,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, "order", epoch as u64)));
    order
}

/// Masked reconstruction pretraining. Each item's degradation and mask come
/// from seeds derived from `(run.seed, item id, epoch)`, so the realized
/// augmentations do not depend on visiting order.
pub fn pretrain(run: &PretrainRun, source: &dyn ImageSource, obs: &mut dyn Observer) -> Result<PretrainOutcome> {
    run.validate()?;
    if source.is_empty() {
        return Err(Error::Data("pretraining source is empty".into()));
    }
    let mut model = build_autoencoder(&run.encoder, &run.fusion, &run.decoder, rng::derive_seed(run.seed, "init", 0))?;
    let n = source.len();
    let per_epoch = run.steps_per_epoch(n);
    let schedule = CosineSchedule::new(&run.optim, per_epoch * run.epochs);
    let mut opt = AdamW::new(run.optim.clone());
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut step = 0;
    for epoch in 0..run.epochs {
        let mut loaded = 0usize;
        for batch in epoch_order(n, run.seed, epoch).chunks(run.batch_size) {
            let mut grads = Grads::empty(model.params.len());
            let mut loss_sum = 0.0;
            let mut count = 0usize;
            for &i in batch {
                let id = source.id(i);
                let img = match source.load(i) {
                    Ok(img) => img,
                    Err(e) => {
                        obs.on_warning(&format!("skipping {id}: {e}"));
                        skipped += 1;
                        continue;
                    }
                };
                let item_seed = rng::derive_seed(run.seed, &id, epoch as u64);
                let degraded = compose(&img, &run.plan.with_seed(item_seed))?;
                let mask = model.sample_mask(run.mask_ratio, rng::derive_seed(item_seed, "mask", 0))?;
                let out = model.pretrain_loss_and_grads(&degraded, &mask, run.norm_target)?;
                loss_sum += out.loss;
                grads.accumulate(&out.grads);
                count += 1;
            }
            loaded += count;
            if count > 0 {
                grads.scale(1.0 / count as f64);
                let lr = schedule.lr(step);
                opt.step(&mut model.params, &grads, lr);
                let rec = LogRecord {
                    step,
                    epoch,
                    loss: loss_sum / count as f64,
                    lr,
                };
                obs.on_step(&rec);
                log.push(rec);
            }
            step += 1;
            if run.checkpoint_every > 0 && step % run.checkpoint_every == 0 {
                obs.on_checkpoint(&model, step)?;
            }
        }
        if loaded == 0 {
            return Err(Error::Data(format!("no readable images in epoch {epoch}")));
        }
    }
    Ok(PretrainOutcome { model, log, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ImageQuality,
    Aesthetics,
    VideoQuality,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image_quality" => Some(Task::ImageQuality),
            "aesthetics" => Some(Task::Aesthetics),
            "video_quality" => Some(Task::VideoQuality),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::ImageQuality => "image_quality",
            Task::Aesthetics => "aesthetics",
            Task::VideoQuality => "video_quality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub task: Task,
    /// Shorter-edge resize before cropping (image quality and video).
    pub resize_short: usize,
    pub crop: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub head_hidden: usize,
    /// Train the head only.
    pub freeze_encoder: bool,
    /// Weight of the pairwise rank-hinge term; `0` gives plain MSE.
    pub rank_weight: f64,
    /// Random horizontal flips of training crops.
    pub flip: bool,
    pub clips: usize,
    pub clip_len: usize,
    pub t_patch: usize,
    pub seed: u64,
}

impl FinetuneRun {
    /// Published protocol for each task at full scale.
    pub fn paper(task: Task, seed: u64) -> Self {
        let (epochs, lr, wd) = match task {
            Task::ImageQuality => (200, 2e-5, 0.01),
            Task::Aesthetics => (60, 2e-5, 0.01),
            Task::VideoQuality => (30, 1e-3, 0.05),
        };
        FinetuneRun {
            task,
            resize_short: 340,
            crop: 224,
            epochs,
            batch_size: 16,
            optim: OptimConfig {
                lr,
                weight_decay: wd,
                beta1: 0.9,
                beta2: 0.999,
                ..OptimConfig::default()
            },
            head_hidden: 384,
            freeze_encoder: false,
            rank_weight: 0.0,
            flip: true,
            clips: 4,
            clip_len: 32,
            t_patch: 2,
            seed,
        }
    }

    pub fn toy(task: Task, seed: u64) -> Self {
        FinetuneRun {
            resize_short: 72,
            crop: 64,
            epochs: 20,
            batch_size: 8,
            optim: OptimConfig {
                lr: 3e-4,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                ..OptimConfig::default()
            },
            head_hidden: 64,
            clip_len: 8,
            ..Self::paper(task, seed)
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        self.optim.validate()?;
        if self.crop != model.encoder.input_size {
            return Err(Error::Config(format!(
                "finetune crop {} must equal the model input size {}",
                self.crop, model.encoder.input_size
            )));
        }
        if self.resize_short == 0 || self.batch_size == 0 || self.head_hidden == 0 {
            return Err(Error::Config("resize_short, batch_size and head_hidden must be positive".into()));
        }
        if self.clips == 0 || self.clip_len == 0 || self.t_patch == 0 {
            return Err(Error::Config("clips, clip_len and t_patch must be positive".into()));
        }
        if self.rank_weight < 0.0 {
            return Err(Error::Config("rank_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Resizes so the shorter edge equals `short`.
pub fn resize_short(img: &Image, short: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let s = h.min(w);
    if s == short {
        return img.clone();
    }
    let scale = short as f64 / s as f64;
    let nh = (libm::round(h as f64 * scale) as usize).max(short);
    let nw = (libm::round(w as f64 * scale) as usize).max(short);
    degrade::resize_to(img, nh, nw)
}

/// Top-left offsets of the four corner crops and the center crop.
pub fn five_crop_offsets(height: usize, width: usize, crop: usize) -> [(usize, usize); 5] {
    let (dy, dx) = (height - crop, width - crop);
    [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)]
}

/// Mean score over the four corner crops and the center crop; undersized
/// inputs are reflect-padded first.
pub fn five_crop_predict(img: &Image, crop: usize, mut score: impl FnMut(&Image) -> Result<f64>) -> Result<f64> {
    if crop == 0 {
        return Err(Error::param("crop", "must be positive"));
    }
    let img = degrade::pad_reflect_to(img, crop);
    let mut total = 0.0;
    for (top, left) in five_crop_offsets(img.height(), img.width(), crop) {
        total += score(&img.crop(top, left, crop, crop)?)?;
    }
    Ok(total / 5.0)
}

/// Start frames of `clips` windows of `clip_len` spread evenly over `frames`.
pub fn clip_starts(frames: usize, clips: usize, clip_len: usize) -> Vec<usize> {
    let room = frames.saturating_sub(clip_len);
    if clips <= 1 {
        return alloc::vec![0; clips];
    }
    (0..clips).map(|i| i * room / (clips - 1)).collect()
}

/// Evenly spaced clips; clips running past the end repeat the last frame.
pub fn sample_video_clips<T: Clone>(frames: &[T], clips: usize, clip_len: usize) -> Vec<Vec<T>> {
    assert!(!frames.is_empty(), "video has no frames");
    clip_starts(frames.len(), clips, clip_len)
        .into_iter()
        .map(|s| (s..s + clip_len).map(|t| frames[t.min(frames.len() - 1)].clone()).collect())
        .collect()
}

fn center_crop(img: &Image, crop: usize) -> Result<Image> {
    let img = degrade::pad_reflect_to(img, crop);
    let (top, left) = ((img.height() - crop) / 2, (img.width() - crop) / 2);
    img.crop(top, left, crop, crop)
}

enum View {
    Still(Image),
    Clip(Vec<Image>),
}

fn train_view(run: &FinetuneRun, sample: &Sample, r: &mut rng::SeededRng) -> Result<View> {
    match (run.task, sample) {
        (Task::Aesthetics, Sample::Image(img)) => Ok(View::Still(degrade::resize_to(img, run.crop, run.crop))),
        (Task::ImageQuality, Sample::Image(img)) => {
            let view = degrade::random_crop(&resize_short(img, run.resize_short), run.crop, r)?;
            Ok(View::Still(if run.flip && r.random_bool(0.5) { view.flip_horizontal() } else { view }))
        }
        (Task::VideoQuality, Sample::Video(frames)) => {
            if frames.is_empty() {
                return Err(Error::Data("video has no frames".into()));
            }
            let start = r.random_range(0..=frames.len().saturating_sub(run.clip_len));
            let first = degrade::pad_reflect_to(&resize_short(&frames[0], run.resize_short), run.crop);
            let (top, left) = (
                r.random_range(0..=first.height() - run.crop),
                r.random_range(0..=first.width() - run.crop),
            );
            let clip = (start..start + run.clip_len)
                .map(|t| {
                    let f = degrade::pad_reflect_to(&resize_short(&frames[t.min(frames.len() - 1)], run.resize_short), run.crop);
                    f.crop(top, left, run.crop, run.crop)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(View::Clip(clip))
        }
        (task, _) => Err(Error::Data(format!("sample kind does not match task {}", task.name()))),
    }
}

/// Evaluation-time score: five crops for image quality, a direct resize for
/// aesthetics, and the mean over evenly spaced center-cropped clips for video.
pub fn predict(model: &Model, run: &FinetuneRun, sample: &Sample) -> Result<f64> {
    match (run.task, sample) {
        (Task::ImageQuality, Sample::Image(img)) => {
            five_crop_predict(&resize_short(img, run.resize_short), run.crop, |c| model.score(c))
        }
        (Task::Aesthetics, Sample::Image(img)) => model.score(&degrade::resize_to(img, run.crop, run.crop)),
        (Task::VideoQuality, Sample::Video(frames)) => {
            if frames.is_empty() {
                return Err(Error::Data("video has no frames".into()));
            }
            let mut total = 0.0;
            for clip in sample_video_clips(frames, run.clips, run.clip_len) {
                let cropped = clip
                    .iter()
                    .map(|f| center_crop(&resize_short(f, run.resize_short), run.crop))
                    .collect::<Result<Vec<_>>>()?;
                total += model.video_score_tape(&cropped, run.t_patch)?.score();
            }
            Ok(total / run.clips as f64)
        }
        (task, _) => Err(Error::Data(format!("sample kind does not match task {}", task.name()))),
    }
}

/// `dL/ds` for mean squared error plus `rank_weight` times the mean pairwise
/// hinge `max(0, -(s_i - s_j) sign(m_i - m_j))`. Returns the loss too.
pub fn batch_loss_grad(scores: &[f64], mos: &[f64], rank_weight: f64) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = scores
        .iter()
        .zip(mos)
        .map(|(s, m)| {
            loss += (s - m) * (s - m) / n;
            2.0 * (s - m) / n
        })
        .collect();
    if rank_weight > 0.0 && scores.len() > 1 {
        let pairs = (scores.len() * (scores.len() - 1) / 2) as f64;
        for i in 0..scores.len() {
            for j in i + 1..scores.len() {
                let sign = if mos[i] > mos[j] {
                    1.0
                } else if mos[i] < mos[j] {
                    -1.0
                } else {
                    continue;
                };
                let margin = -(scores[i] - scores[j]) * sign;
                if margin > 0.0 {
                    loss += rank_weight * margin / pairs;
                    grad[i] -= rank_weight * sign / pairs;
                    grad[j] += rank_weight * sign / pairs;
                }
            }
        }
    }
    (loss, grad)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

/// Regresses opinion scores from encoder features through a two-layer head.
/// The head's output bias starts at the mean training score.
pub fn finetune(
    pretrained: &Model,
    run: &FinetuneRun,
    data: &dyn LabeledSource,
    indices: &[usize],
    obs: &mut dyn Observer,
) -> Result<FinetuneOutcome> {
    run.validate(pretrained)?;
    if indices.is_empty() {
        return Err(Error::Data("no finetuning samples".into()));
    }
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        targets.push(
            data.mos(i)
                .ok_or_else(|| Error::Data(format!("sample {} has no mos label", data.id(i))))?,
        );
    }
    let mut model = pretrained.clone();
    if !model.has_head() {
        model.attach_head(run.head_hidden, rng::derive_seed(run.seed, "head", 0));
        model.set_head_bias(targets.iter().sum::<f64>() / targets.len() as f64);
    }
    let head_only: Vec<bool> = model.params.iter().map(|(_, n, _)| n.starts_with("head.")).collect();
    let per_epoch = indices.len().div_ceil(run.batch_size);
    let schedule = CosineSchedule::new(&run.optim, per_epoch * run.epochs);
    let mut opt = AdamW::new(run.optim.clone());
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..run.epochs {
        for batch in epoch_order(indices.len(), run.seed, epoch).chunks(run.batch_size) {
            let mut views = Vec::with_capacity(batch.len());
            for &k in batch {
                let i = indices[k];
                let mut r = rng::seeded(rng::derive_seed(run.seed, &data.id(i), epoch as u64));
                views.push(train_view(run, &data.load(i)?, &mut r)?);
            }
            let tapes = views
                .iter()
                .map(|v| match v {
                    View::Still(img) => model.score_tape(img),
                    View::Clip(clip) => model.video_score_tape(clip, run.t_patch),
                })
                .collect::<Result<Vec<_>>>()?;
            let scores: Vec<f64> = tapes.iter().map(|t| t.score()).collect();
            let mos: Vec<f64> = batch.iter().map(|&k| targets[k]).collect();
            let (loss, d) = batch_loss_grad(&scores, &mos, run.rank_weight);
            let mut grads = Grads::empty(model.params.len());
            for (tape, di) in tapes.iter().zip(&d) {
                grads.accumulate(&tape.backward(*di));
            }
            drop(tapes);
            if run.freeze_encoder {
                grads.retain(|id| head_only[id.0]);
            }
            let lr = schedule.lr(step);
            opt.step(&mut model.params, &grads, lr);
            let rec = LogRecord { step, epoch, loss, lr };
            obs.on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(FinetuneOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionKind, ProjectionKind};
    use crate::synth::{gen_texture, SynthSpec};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            patch: 4,
            stage_dims: [8, 8, 16],
            stage_depths: [1, 1, 1],
            heads: 2,
            input_size: 32,
            mlp_ratio: 2,
        }
    }

    fn tiny_run(seed: u64) -> PretrainRun {
        let encoder = tiny_encoder();
        PretrainRun {
            plan: DegradationPlan::crop_only(32, seed),
            encoder,
            fusion: FusionConfig {
                fuse_stages: alloc::vec![1],
                projection: ProjectionKind::Linear,
                fusion: FusionKind::WeightedPool,
            },
            decoder: DecoderConfig {
                dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            mask_ratio: 0.75,
            epochs: 2,
            batch_size: 4,
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            norm_target: false,
            checkpoint_every: 0,
            seed,
        }
    }

    fn textures(n: usize, size: usize) -> Memory<(String, Image)> {
        let spec = SynthSpec::new(n, size, 3);
        Memory {
            items: (0..n).map(|i| (format!("t{i}"), gen_texture(&spec, i))).collect(),
        }
    }

    #[test]
    fn clip_start_formula() {
        assert_eq!(clip_starts(128, 4, 32), alloc::vec![0, 32, 64, 96]);
        assert_eq!(clip_starts(32, 4, 32), alloc::vec![0, 0, 0, 0]);
        let want: Vec<usize> = (0..4).map(|i| (i as f64 * (100.0 - 32.0) / 3.0).floor() as usize).collect();
        assert_eq!(clip_starts(100, 4, 32), want);
        let frames: Vec<u32> = (0..10).collect();
        let clips = sample_video_clips(&frames, 2, 4);
        assert_eq!(clips, alloc::vec![alloc::vec![0, 1, 2, 3], alloc::vec![6, 7, 8, 9]]);
        let short = sample_video_clips(&frames[..3], 4, 5);
        assert!(short.iter().all(|c| c == &alloc::vec![0, 1, 2, 2, 2]));
    }

    #[test]
    fn five_crop_cases() {
        let spec = SynthSpec::new(1, 40, 1);
        let img = gen_texture(&spec, 0);
        assert_eq!(five_crop_predict(&img, 16, |_| Ok(2.5)).unwrap(), 2.5);
        let exact = img.crop(0, 0, 16, 16).unwrap();
        let mean = |c: &Image| Ok(c.data().iter().sum::<f64>() / c.data().len() as f64);
        assert_eq!(five_crop_predict(&exact, 16, mean).unwrap(), mean(&exact).unwrap());
        // hand-enumerated windows of a 40×40 image, crop 16
        let windows = [(0, 0), (0, 24), (24, 0), (24, 24), (12, 12)];
        let want = windows.iter().map(|&(t, l)| mean(&img.crop(t, l, 16, 16).unwrap()).unwrap()).sum::<f64>() / 5.0;
        assert!((five_crop_predict(&img, 16, mean).unwrap() - want).abs() < 1e-12);
        // undersized input is padded rather than rejected
        assert!(five_crop_predict(&img.crop(0, 0, 10, 10).unwrap(), 16, mean).is_ok());
    }

    #[test]
    fn rank_hinge_gradient_matches_differences() {
        let s = [0.3, 1.2, -0.4, 0.9];
        let m = [1.0, 0.5, 2.0, 2.0];
        let (_, g) = batch_loss_grad(&s, &m, 0.7);
        for i in 0..4 {
            let h = 1e-6;
            let mut up = s;
            up[i] += h;
            let mut dn = s;
            dn[i] -= h;
            let fd = (batch_loss_grad(&up, &m, 0.7).0 - batch_loss_grad(&dn, &m, 0.7).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut run = tiny_run(5);
        run.epochs = 0;
        let out = pretrain(&run, &textures(3, 40), &mut Quiet).unwrap();
        let init = build_autoencoder(&run.encoder, &run.fusion, &run.decoder, rng::derive_seed(5, "init", 0)).unwrap();
        assert_eq!(out.model.checksum(), init.checksum());
        assert!(out.log.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let data = textures(24, 40);
        let mut run = tiny_run(6);
        run.epochs = 4;
        let a = pretrain(&run, &data, &mut Quiet).unwrap();
        let b = pretrain(&run, &data, &mut Quiet).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.log, b.log);
        let epoch_mean = |e| {
            let v: Vec<f64> = a.log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(epoch_mean(3) < epoch_mean(0));
    }

    struct Flaky(Memory<(String, Image)>);

    impl ImageSource for Flaky {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn id(&self, i: usize) -> String {
            self.0.id(i)
        }
        fn load(&self, i: usize) -> Result<Image> {
            if i % 2 == 0 {
                Err(Error::Data("unreadable".into()))
            } else {
                self.0.load(i)
            }
        }
    }

    struct Warnings(usize);

    impl Observer for Warnings {
        fn on_warning(&mut self, _: &str) {
            self.0 += 1;
        }
    }

    #[test]
    fn unreadable_images_are_skipped() {
        let mut run = tiny_run(7);
        run.epochs = 1;
        let mut w = Warnings(0);
        let out = pretrain(&run, &Flaky(textures(6, 32)), &mut w).unwrap();
        assert_eq!((out.skipped, w.0), (3, 3));
        let mut dead = textures(1, 32);
        dead.items.clear();
        assert!(pretrain(&run, &dead, &mut Quiet).is_err());
        let all_bad = Flaky(textures(1, 32));
        assert!(pretrain(&run, &all_bad, &mut Quiet).is_err());
    }

    fn labeled(n: usize, mos: impl Fn(usize, &Image) -> f64) -> Memory<LabeledItem> {
        let spec = SynthSpec::new(n, 36, 8);
        Memory {
            items: (0..n)
                .map(|i| {
                    let img = gen_texture(&spec, i);
                    LabeledItem {
                        id: format!("l{i}"),
                        mos: Some(mos(i, &img)),
                        sample: Sample::Image(img),
                    }
                })
                .collect(),
        }
    }

    fn tiny_finetune(seed: u64) -> FinetuneRun {
        FinetuneRun {
            resize_short: 36,
            crop: 32,
            epochs: 8,
            batch_size: 4,
            head_hidden: 16,
            ..FinetuneRun::toy(Task::ImageQuality, seed)
        }
    }

    fn tiny_model() -> Model {
        build_autoencoder(&tiny_encoder(), &FusionConfig::none(), &DecoderConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2 }, 1).unwrap()
    }

    #[test]
    fn frozen_encoder_head_fits_linear_target() {
        let data = labeled(16, |_, img| 1.0 + 4.0 * img.data().iter().sum::<f64>() / img.data().len() as f64);
        let model = tiny_model();
        let mut run = tiny_finetune(2);
        run.freeze_encoder = true;
        run.epochs = 15;
        run.optim.lr = 1e-2;
        let idx: Vec<usize> = (0..16).collect();
        let out = finetune(&model, &run, &data, &idx, &mut Quiet).unwrap();
        let first: f64 = out.log[..4].iter().map(|r| r.loss).sum();
        let last: f64 = out.log[out.log.len() - 4..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
        for (id, name, t) in out.model.params.iter() {
            if !name.starts_with("head.") {
                assert_eq!(t, model.params.get(id), "{name} changed");
            }
        }
    }

    #[test]
    fn constant_target_is_reproduced() {
        let data = labeled(8, |_, _| 3.7);
        let mut run = tiny_finetune(3);
        run.epochs = 40;
        run.optim.lr = 5e-3;
        let idx: Vec<usize> = (0..8).collect();
        let untrained = finetune(&tiny_model(), &FinetuneRun { epochs: 0, ..run.clone() }, &data, &idx, &mut Quiet).unwrap();
        let out = finetune(&tiny_model(), &run, &data, &idx, &mut Quiet).unwrap();
        for i in 0..8 {
            let sample = data.load(i).unwrap();
            let before = (predict(&untrained.model, &run, &sample).unwrap() - 3.7).abs();
            let after = (predict(&out.model, &run, &sample).unwrap() - 3.7).abs();
            assert!(after < 0.05 && after <= before, "{before} -> {after}");
        }
        let again = finetune(&tiny_model(), &run, &data, &idx, &mut Quiet).unwrap();
        assert_eq!(out.model.checksum(), again.model.checksum());
    }

    #[test]
    fn missing_labels_are_data_errors() {
        let mut data = labeled(4, |_, _| 1.0);
        data.items[2].mos = None;
        let err = finetune(&tiny_model(), &tiny_finetune(1), &data, &[0, 1, 2], &mut Quiet).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn video_task_trains_and_predicts() {
        let spec = SynthSpec::new(4, 36, 9);
        let data = Memory {
            items: (0..4)
                .map(|i| {
                    let (frames, mos) = crate::synth::synth_video(&spec, i, 6).unwrap();
                    LabeledItem {
                        id: format!("v{i}"),
                        sample: Sample::Video(frames),
                        mos: Some(mos),
                    }
                })
                .collect(),
        };
        let run = FinetuneRun {
            task: Task::VideoQuality,
            clip_len: 4,
            epochs: 1,
            ..tiny_finetune(4)
        };
        let out = finetune(&tiny_model(), &run, &data, &[0, 1, 2, 3], &mut Quiet).unwrap();
        assert!(predict(&out.model, &run, &data.load(0).unwrap()).unwrap().is_finite());
        let wrong = FinetuneRun { task: Task::ImageQuality, ..run };
        assert!(predict(&out.model, &wrong, &data.load(0).unwrap()).is_err());
    }
}
