//! A three-stage hierarchical masked autoencoder.
//!
//! Geometry: the input (`input_size` square) is tiled into fine patches of
//! `patch` pixels. Two 2×2 patch merges give a mid grid and a coarse grid;
//! one coarse token covers a `4*patch` square ("unit"). Masking happens on the
//! coarse grid, so every merge group is either fully visible or fully masked,
//! and the decoder reconstructs whole units.
//!
//! Stages 1–2 are channel-MLP blocks; stage 3 and the decoder use global
//! multi-head self-attention. During pretraining, features of the selected
//! shallow stages are pooled onto the coarse grid, projected to the decoder
//! width and fused with the projected stage-3 features. Finetuning uses the
//! encoder alone.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::masking::{self, MaskPlan, PatchSet};
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

/// Pixels enter the patch embedding as `(v - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub stage_dims: [usize; 3],
    pub stage_depths: [usize; 3],
    pub heads: usize,
    pub input_size: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    WeightedPool,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Shallow stages fused with stage 3, a subset of `{1, 2}`.
    pub fuse_stages: Vec<usize>,
    pub projection: ProjectionKind,
    pub fusion: FusionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Input 64, patch 8, dims `[32, 48, 96]`, depths `[1, 1, 2]`.
    pub fn toy() -> Self {
        EncoderConfig {
            patch: 8,
            stage_dims: [32, 48, 96],
            stage_depths: [1, 1, 2],
            heads: 4,
            input_size: 64,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d1, d2, d3] = self.stage_dims;
        if self.patch == 0 || self.input_size == 0 || self.input_size % (self.patch * 4) != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 4*patch ({})",
                self.input_size,
                4 * self.patch
            )));
        }
        if !(d1 <= d2 && d2 <= d3) || d1 == 0 {
            return Err(Error::Config("stage dims must be positive and non-decreasing".into()));
        }
        if d1 % 4 != 0 {
            return Err(Error::Config("stage-1 dim must be divisible by 4 for 2-D positional encoding".into()));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.heads == 0 || d3 % self.heads != 0 {
            return Err(Error::Config("stage-3 dim must be divisible by heads".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn unit(&self) -> usize {
        self.patch * 4
    }

    pub fn fine_side(&self) -> usize {
        self.input_size / self.patch
    }

    /// Side of the coarse (stage-3, masking) grid.
    pub fn coarse_side(&self) -> usize {
        self.input_size / self.unit()
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

impl FusionConfig {
    pub fn none() -> Self {
        FusionConfig {
            fuse_stages: Vec::new(),
            projection: ProjectionKind::Linear,
            fusion: FusionKind::WeightedPool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &s in &self.fuse_stages {
            if !(s == 1 || s == 2) {
                return Err(Error::Config(format!("fuse stage {s} not in {{1, 2}}")));
            }
            if seen[s] {
                return Err(Error::Config(format!("fuse stage {s} listed twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    /// Stages entering the fusion in ascending order, always ending with 3.
    pub fn fused_stages(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.fuse_stages.clone();
        s.sort_unstable();
        s.push(3);
        s
    }
}

impl DecoderConfig {
    pub fn toy() -> Self {
        DecoderConfig {
            dim: 64,
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config("decoder dim must be a positive multiple of 4".into()));
        }
        if self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config("decoder needs depth >= 1 and dim divisible by heads".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct MixerBlock {
    norm: Norm,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct AttnBlock {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    mlp: Mlp,
    heads: usize,
}

#[derive(Clone, Copy, Debug)]
struct Merge {
    norm: Norm,
    reduction: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Projection {
    Linear(Linear),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
struct Fusion {
    projections: Vec<(usize, Projection)>,
    weights: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Linear,
    stage1: Vec<MixerBlock>,
    merge1: Merge,
    stage2: Vec<MixerBlock>,
    merge2: Merge,
    stage3: Vec<AttnBlock>,
    enc_norm: Norm,
    fusion: Option<Fusion>,
    dec_embed: Option<Linear>,
    mask_token: ParamId,
    dec_blocks: Vec<AttnBlock>,
    dec_norm: Norm,
    dec_pred: Linear,
    head: Option<Mlp>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: SeededRng,
}

impl Init<'_> {
    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
        self.store.add(name, t)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.xavier(&format!("{prefix}.weight"), fan_in, fan_out);
        let b = bias.then(|| self.store.add(&format!("{prefix}.bias"), Tensor::zeros(1, fan_out)));
        Linear { w, b }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(&format!("{prefix}.weight"), Tensor::full(1, dim, 1.0)),
            beta: self.store.add(&format!("{prefix}.bias"), Tensor::zeros(1, dim)),
        }
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{prefix}.fc1"), input, hidden, true),
            fc2: self.linear(&format!("{prefix}.fc2"), hidden, output, true),
        }
    }

    fn mixer(&mut self, prefix: &str, dim: usize, ratio: usize) -> MixerBlock {
        MixerBlock {
            norm: self.norm(&format!("{prefix}.norm"), dim),
            mlp: self.mlp(&format!("{prefix}.mlp"), dim, dim * ratio, dim),
        }
    }

    fn attn(&mut self, prefix: &str, dim: usize, heads: usize, ratio: usize) -> AttnBlock {
        AttnBlock {
            norm1: self.norm(&format!("{prefix}.norm1"), dim),
            qkv: self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, true),
            proj: self.linear(&format!("{prefix}.attn.proj"), dim, dim, true),
            norm2: self.norm(&format!("{prefix}.norm2"), dim),
            mlp: self.mlp(&format!("{prefix}.mlp"), dim, dim * ratio, dim),
            heads,
        }
    }

    fn merge(&mut self, prefix: &str, input: usize, output: usize) -> Merge {
        Merge {
            norm: self.norm(&format!("{prefix}.norm"), 4 * input),
            reduction: self.linear(&format!("{prefix}.reduction"), 4 * input, output, false),
        }
    }
}

/// Parameters plus the configuration they were built from.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    pub params: ParamStore,
    layout: Layout,
}

/// Stage outputs for the visible units, with grid positions per token.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub pos1: Vec<usize>,
    pub pos2: Vec<usize>,
    pub pos3: Vec<usize>,
}

struct StageVars {
    x1: Var,
    x2: Var,
    x3: Var,
    pos1: Vec<usize>,
    pos2: Vec<usize>,
    pos3: Vec<usize>,
}

/// Fixed 2-D sine/cosine embedding; half the channels encode the row, half the column.
pub fn sincos_2d(side: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    Tensor::from_fn(side * side, dim, |pos, c| {
        let (y, x) = ((pos / side) as f64, (pos % side) as f64);
        let coord = if c < dim / 2 { y } else { x };
        let k = c % (dim / 2);
        let omega = 1.0 / libm::pow(10000.0, (k % quarter) as f64 / quarter as f64);
        if k < quarter {
            libm::sin(coord * omega)
        } else {
            libm::cos(coord * omega)
        }
    })
}

/// `build_autoencoder`: deterministic initialization from `seed`.
pub fn build_autoencoder(
    encoder: &EncoderConfig,
    fusion: &FusionConfig,
    decoder: &DecoderConfig,
    seed: u64,
) -> Result<Model> {
    encoder.validate()?;
    fusion.validate()?;
    decoder.validate()?;
    let [d1, d2, d3] = encoder.stage_dims;
    let r = encoder.mlp_ratio;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: rng::seeded(seed),
    };
    let embed = init.linear("encoder.patch_embed", encoder.patch_width(), d1, true);
    let stage1 = (0..encoder.stage_depths[0])
        .map(|i| init.mixer(&format!("encoder.stage1.block{i}"), d1, r))
        .collect();
    let merge1 = init.merge("encoder.merge1", d1, d2);
    let stage2 = (0..encoder.stage_depths[1])
        .map(|i| init.mixer(&format!("encoder.stage2.block{i}"), d2, r))
        .collect();
    let merge2 = init.merge("encoder.merge2", d2, d3);
    let stage3 = (0..encoder.stage_depths[2])
        .map(|i| init.attn(&format!("encoder.stage3.block{i}"), d3, encoder.heads, r))
        .collect();
    let enc_norm = init.norm("encoder.norm", d3);

    let dd = decoder.dim;
    let (fusion_layout, dec_embed) = if fusion.fuse_stages.is_empty() {
        (None, Some(init.linear("decoder.embed", d3, dd, true)))
    } else {
        let stages = fusion.fused_stages();
        let projections = stages
            .iter()
            .map(|&s| {
                let input = encoder.stage_dims[s - 1];
                let prefix = format!("fusion.proj{s}");
                let p = match fusion.projection {
                    ProjectionKind::Linear => Projection::Linear(init.linear(&prefix, input, dd, true)),
                    ProjectionKind::Mlp => Projection::Mlp(init.mlp(&prefix, input, dd, dd)),
                };
                (s, p)
            })
            .collect();
        let weights = (fusion.fusion == FusionKind::WeightedPool)
            .then(|| init.store.add("fusion.weights", Tensor::full(1, stages.len(), 1.0)));
        (Some(Fusion { projections, weights }), None)
    };
    let mask_token = {
        let rng = &mut init.rng;
        let t = Tensor::from_fn(1, dd, |_, _| 0.02 * rng::gaussian(rng));
        init.store.add("decoder.mask_token", t)
    };
    let dec_blocks = (0..decoder.depth)
        .map(|i| init.attn(&format!("decoder.block{i}"), dd, decoder.heads, decoder.mlp_ratio))
        .collect();
    let dec_norm = init.norm("decoder.norm", dd);
    let unit = encoder.unit();
    let dec_pred = init.linear("decoder.pred", dd, unit * unit * CHANNELS, true);

    Ok(Model {
        encoder: encoder.clone(),
        fusion: fusion.clone(),
        decoder: decoder.clone(),
        seed,
        params: store,
        layout: Layout {
            embed,
            stage1,
            merge1,
            stage2,
            merge2,
            stage3,
            enc_norm,
            fusion: fusion_layout,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            dec_pred,
            head: None,
        },
    })
}

fn linear(g: &mut Graph, x: Var, l: &Linear) -> Var {
    let w = g.param(l.w);
    let y = g.matmul(x, w);
    match l.b {
        Some(b) => {
            let b = g.param(b);
            g.add_bias(y, b)
        }
        None => y,
    }
}

fn norm(g: &mut Graph, x: Var, n: &Norm) -> Var {
    let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
    g.layer_norm(x, gamma, beta)
}

fn mlp(g: &mut Graph, x: Var, m: &Mlp) -> Var {
    let h = linear(g, x, &m.fc1);
    let h = g.gelu(h);
    linear(g, h, &m.fc2)
}

fn mixer_block(g: &mut Graph, x: Var, b: &MixerBlock) -> Var {
    let h = norm(g, x, &b.norm);
    let h = mlp(g, h, &b.mlp);
    g.add(x, h)
}

fn attn_block(g: &mut Graph, x: Var, b: &AttnBlock) -> Var {
    let dim = g.value(x).cols();
    let hd = dim / b.heads;
    let h = norm(g, x, &b.norm1);
    let qkv = linear(g, h, &b.qkv);
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut outs = Vec::with_capacity(b.heads);
    for head in 0..b.heads {
        let q = g.slice_cols(qkv, head * hd, hd);
        let k = g.slice_cols(qkv, dim + head * hd, hd);
        let v = g.slice_cols(qkv, 2 * dim + head * hd, hd);
        let kt = g.transpose(k);
        let s = g.matmul(q, kt);
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, v));
    }
    let o = g.concat_cols(&outs);
    let o = linear(g, o, &b.proj);
    let x = g.add(x, o);
    let h = norm(g, x, &b.norm2);
    let h = mlp(g, h, &b.mlp);
    g.add(x, h)
}

fn merge(g: &mut Graph, x: Var, m: &Merge, groups: &[Vec<usize>]) -> Var {
    let cat = g.group_concat(x, groups);
    let h = norm(g, cat, &m.norm);
    linear(g, h, &m.reduction)
}

fn project(g: &mut Graph, x: Var, p: &Projection) -> Var {
    match p {
        Projection::Linear(l) => linear(g, x, l),
        Projection::Mlp(m) => mlp(g, x, m),
    }
}

/// Row groups for merging: `count` parents, each with four consecutive
/// children quads laid out as a 2×2 block inside a `side×side` child tile.
fn merge_groups(parents: usize, side: usize) -> Vec<Vec<usize>> {
    let half = side / 2;
    let per_parent = side * side;
    let mut groups = Vec::with_capacity(parents * half * half);
    for p in 0..parents {
        for my in 0..half {
            for mx in 0..half {
                groups.push(
                    [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| p * per_parent + (2 * my + dy) * side + 2 * mx + dx)
                        .collect(),
                );
            }
        }
    }
    groups
}

fn pool_groups(parents: usize, per_parent: usize) -> Vec<Vec<usize>> {
    (0..parents)
        .map(|p| (p * per_parent..(p + 1) * per_parent).collect())
        .collect()
}

/// A scoring forward pass kept alive for a later backward pass, so batch
/// losses that couple several scores can supply `dL/dscore` per item.
pub struct ScoreTape<'p> {
    graph: Graph<'p>,
    score: Var,
}

impl ScoreTape<'_> {
    pub fn score(&self) -> f64 {
        self.graph.value(self.score).get(0, 0)
    }

    pub fn backward(&self, d_score: f64) -> Grads {
        self.graph.backward_with(self.score, Tensor::full(1, 1, d_score))
    }
}

/// Mean squared error for pretraining plus gradients.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Grads,
}

impl Model {
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar counts per top-level submodule (`encoder`, `fusion`, `decoder`, `head`).
    pub fn param_report(&self) -> alloc::collections::BTreeMap<String, usize> {
        self.params.count_report(1)
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn has_head(&self) -> bool {
        self.layout.head.is_some()
    }

    /// Adds the scoring head (`d3 -> hidden -> 1` with GELU between).
    pub fn attach_head(&mut self, hidden: usize, seed: u64) {
        if self.layout.head.is_some() {
            return;
        }
        let d3 = self.encoder.stage_dims[2];
        let mut init = Init {
            store: &mut self.params,
            rng: rng::seeded(seed),
        };
        self.layout.head = Some(init.mlp("head", d3, hidden, 1));
    }

    /// Sets the output bias of the scoring head.
    pub fn set_head_bias(&mut self, value: f64) {
        if let Some(b) = self.layout.head.and_then(|h| h.fc2.b) {
            self.params.get_mut(b).set(0, 0, value);
        }
    }

    /// Parameter ids of the projection, fusion and decoder submodules
    /// (including the mask token): everything used only in pretraining.
    pub fn pretrain_only_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("fusion.") || n.starts_with("decoder."))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn mask_token(&self) -> ParamId {
        self.layout.mask_token
    }

    /// A mask over the coarse grid at `ratio`.
    pub fn sample_mask(&self, ratio: f64, seed: u64) -> Result<MaskPlan> {
        let side = self.encoder.coarse_side();
        masking::sample_mask(side, side, ratio, seed)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let s = self.encoder.input_size;
        if img.height() != s || img.width() != s {
            return Err(Error::param(
                "image",
                format!("expected {s}x{s}, got {}x{}", img.height(), img.width()),
            ));
        }
        Ok(())
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<()> {
        let side = self.encoder.coarse_side();
        if plan.grid_h != side || plan.grid_w != side {
            return Err(Error::param("plan", format!("mask grid must be {side}x{side}")));
        }
        Ok(())
    }

    /// Unit patches (`4*patch` squares) of an input-sized image.
    pub fn units(&self, img: &Image) -> Result<PatchSet> {
        self.check_image(img)?;
        masking::patchify(img, self.encoder.unit())
    }

    fn check_units(&self, units: &PatchSet) -> Result<()> {
        let enc = &self.encoder;
        if units.patch != enc.unit() {
            return Err(Error::param("visible", format!("expected unit patches of {} pixels", enc.unit())));
        }
        if units.is_empty() {
            return Err(Error::param("visible", "no visible units"));
        }
        let cs = enc.coarse_side();
        if units.positions.iter().any(|&p| p >= cs * cs) {
            return Err(Error::param("visible", "position outside the coarse grid"));
        }
        Ok(())
    }

    /// Fine patches of each unit, 16 rows per unit in row-major sub-grid
    /// order, appended to `fine`.
    fn push_fine_tokens(&self, units: &PatchSet, fine: &mut Vec<f64>) {
        let p = self.encoder.patch;
        let unit = self.encoder.unit();
        for i in 0..units.len() {
            let token = units.tokens.row(i);
            for sy in 0..4 {
                for sx in 0..4 {
                    for y in 0..p {
                        let src = ((sy * p + y) * unit + sx * p) * CHANNELS;
                        fine.extend(token[src..src + p * CHANNELS].iter().map(|v| (v - INPUT_MEAN) / INPUT_STD));
                    }
                }
            }
        }
    }

    /// Runs the encoder over fine tokens grouped 16 per unit; `unit_pos`
    /// gives the coarse position of every unit (repeats allowed across
    /// time slices).
    fn encode_tokens(&self, g: &mut Graph, fine: Tensor, unit_pos: &[usize]) -> StageVars {
        let enc = &self.encoder;
        let (cs, fs, ms) = (enc.coarse_side(), enc.fine_side(), enc.coarse_side() * 2);
        let n = unit_pos.len();
        let mut pos1 = Vec::with_capacity(n * 16);
        let mut pos2 = Vec::with_capacity(n * 4);
        for &pos in unit_pos {
            let (cy, cx) = (pos / cs, pos % cs);
            for sy in 0..4 {
                for sx in 0..4 {
                    pos1.push((cy * 4 + sy) * fs + cx * 4 + sx);
                }
            }
            for my in 0..2 {
                for mx in 0..2 {
                    pos2.push((cy * 2 + my) * ms + cx * 2 + mx);
                }
            }
        }
        let l = &self.layout;
        let x = g.constant(fine);
        let x = linear(g, x, &l.embed);
        let pe_full = sincos_2d(fs, enc.stage_dims[0]);
        let pe = g.constant(Tensor::from_fn(pos1.len(), enc.stage_dims[0], |r, c| pe_full.get(pos1[r], c)));
        let mut x1 = g.add(x, pe);
        for b in &l.stage1 {
            x1 = mixer_block(g, x1, b);
        }
        let mut x2 = merge(g, x1, &l.merge1, &merge_groups(n, 4));
        for b in &l.stage2 {
            x2 = mixer_block(g, x2, b);
        }
        let mut x3 = merge(g, x2, &l.merge2, &merge_groups(n, 2));
        for b in &l.stage3 {
            x3 = attn_block(g, x3, b);
        }
        let x3 = norm(g, x3, &l.enc_norm);
        StageVars {
            x1,
            x2,
            x3,
            pos1,
            pos2,
            pos3: unit_pos.to_vec(),
        }
    }

    fn encode_graph(&self, g: &mut Graph, visible: &PatchSet) -> Result<StageVars> {
        self.check_units(visible)?;
        let mut fine = Vec::with_capacity(visible.len() * 16 * self.encoder.patch_width());
        self.push_fine_tokens(visible, &mut fine);
        let fine = Tensor::from_vec(visible.len() * 16, self.encoder.patch_width(), fine);
        Ok(self.encode_tokens(g, fine, &visible.positions))
    }

    /// Encoder over a clip with the patch embedding inflated over `t_patch`
    /// frames. Each slice of `t_patch` frames becomes one set of tube tokens;
    /// stage-3 attention spans all slices. Multiplying a tube by the inflated
    /// weights equals embedding the slice's mean frame with the 2-D weights,
    /// which is how it is computed here.
    fn video_graph<'g>(&'g self, clip: &[Image], t_patch: usize) -> Result<(Graph<'g>, Var)> {
        if clip.is_empty() || t_patch == 0 {
            return Err(Error::param("clip", "need at least one frame and t_patch >= 1"));
        }
        let mut fine = Vec::new();
        let mut unit_pos = Vec::new();
        for slice in clip.chunks(t_patch) {
            // a short trailing slice repeats its last frame
            let mut mean = self.units(&slice[0])?;
            let mut frames = 1usize;
            for t in 1..t_patch {
                let f = self.units(&slice[t.min(slice.len() - 1)])?;
                mean.tokens.add_assign(&f.tokens);
                frames += 1;
            }
            mean.tokens.scale_assign(1.0 / frames as f64);
            self.push_fine_tokens(&mean, &mut fine);
            unit_pos.extend_from_slice(&mean.positions);
        }
        let rows = unit_pos.len() * 16;
        let mut g = Graph::new(&self.params);
        let s = self.encode_tokens(&mut g, Tensor::from_vec(rows, self.encoder.patch_width(), fine), &unit_pos);
        let f = g.mean_rows(s.x3);
        Ok((g, f))
    }

    /// Clip features (`1×d3`) with the patch embedding inflated over `t_patch` frames.
    pub fn forward_video(&self, clip: &[Image], t_patch: usize) -> Result<Tensor> {
        let (g, f) = self.video_graph(clip, t_patch)?;
        Ok(g.value(f).clone())
    }

    fn fuse_graph(&self, g: &mut Graph, s: &StageVars) -> Var {
        let l = &self.layout;
        let Some(fusion) = &l.fusion else {
            return linear(g, s.x3, l.dec_embed.as_ref().expect("decoder embedding without fusion"));
        };
        let n = s.pos3.len();
        let weights = fusion.weights.map(|w| {
            let raw = g.param(w);
            let sq = g.mul(raw, raw);
            g.normalize_sum(sq)
        });
        let mut acc: Option<Var> = None;
        for (j, (stage, proj)) in fusion.projections.iter().enumerate() {
            let pooled = match stage {
                1 => g.group_mean(s.x1, &pool_groups(n, 16)),
                2 => g.group_mean(s.x2, &pool_groups(n, 4)),
                _ => s.x3,
            };
            let mut y = project(g, pooled, proj);
            if let Some(w) = weights {
                y = g.scale_by_entry(y, w, j);
            }
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        acc.expect("stage 3 is always fused")
    }

    /// Decoder positional encoding on the coarse grid: the fine-grid encoding
    /// averaged over each unit.
    fn decoder_pos(&self) -> Tensor {
        let enc = &self.encoder;
        let (fs, cs, dd) = (enc.fine_side(), enc.coarse_side(), self.decoder.dim);
        let fine = sincos_2d(fs, dd);
        Tensor::from_fn(cs * cs, dd, |pos, c| {
            let (cy, cx) = (pos / cs, pos % cs);
            let mut acc = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    acc += fine.get((cy * 4 + sy) * fs + cx * 4 + sx, c);
                }
            }
            acc / 16.0
        })
    }

    fn decode_graph(&self, g: &mut Graph, y: Var, visible_pos: &[usize], plan: &MaskPlan) -> Result<Var> {
        self.check_plan(plan)?;
        let mut visible_sorted = visible_pos.to_vec();
        visible_sorted.sort_unstable();
        if visible_sorted != plan.visible_positions() {
            return Err(Error::param("plan", "visible tokens do not match the mask"));
        }
        let l = &self.layout;
        let n_vis = visible_pos.len();
        let mut row_of = vec![n_vis; plan.len()];
        for (row, &p) in visible_pos.iter().enumerate() {
            row_of[p] = row;
        }
        let token = g.param(l.mask_token);
        let pool = g.concat_rows(&[y, token]);
        let full = g.gather_rows(pool, &row_of);
        let pe = g.constant(self.decoder_pos());
        let mut h = g.add(full, pe);
        for b in &l.dec_blocks {
            h = attn_block(g, h, b);
        }
        let h = norm(g, h, &l.dec_norm);
        let h = linear(g, h, &l.dec_pred);
        Ok(g.gather_rows(h, &plan.masked_positions()))
    }

    /// `encode_stages`: per-stage features of the visible units.
    pub fn encode_stages(&self, visible: &PatchSet) -> Result<StageFeatures> {
        let mut g = Graph::new(&self.params);
        let s = self.encode_graph(&mut g, visible)?;
        Ok(StageFeatures {
            x1: g.value(s.x1).clone(),
            x2: g.value(s.x2).clone(),
            x3: g.value(s.x3).clone(),
            pos1: s.pos1,
            pos2: s.pos2,
            pos3: s.pos3,
        })
    }

    /// `fuse_multiscale`: decoder-width tokens `Y`, one per visible unit.
    pub fn fuse_multiscale(&self, feats: &StageFeatures) -> Tensor {
        let mut g = Graph::new(&self.params);
        let vars = StageVars {
            x1: g.constant(feats.x1.clone()),
            x2: g.constant(feats.x2.clone()),
            x3: g.constant(feats.x3.clone()),
            pos1: feats.pos1.clone(),
            pos2: feats.pos2.clone(),
            pos3: feats.pos3.clone(),
        };
        let y = self.fuse_graph(&mut g, &vars);
        g.value(y).clone()
    }

    /// `decode_reconstruct`: predicted unit pixels at the masked positions,
    /// in ascending position order. `visible_pos` lists the grid position of
    /// each row of `y`.
    pub fn decode_reconstruct(&self, y: &Tensor, visible_pos: &[usize], plan: &MaskPlan) -> Result<PatchSet> {
        let mut g = Graph::new(&self.params);
        let yv = g.constant(y.clone());
        let out = self.decode_graph(&mut g, yv, visible_pos, plan)?;
        PatchSet::new(self.encoder.unit(), g.value(out).clone(), plan.masked_positions())
    }

    fn pretrain_graph<'g>(
        &'g self,
        img: &Image,
        plan: &MaskPlan,
        norm_target: bool,
    ) -> Result<(Graph<'g>, Var)> {
        self.check_plan(plan)?;
        let units = self.units(img)?;
        let (visible, target) = masking::split_visible(&units, plan)?;
        let target = if norm_target {
            masking::normalize_patches(&target)
        } else {
            target
        };
        let mut g = Graph::new(&self.params);
        let stages = self.encode_graph(&mut g, &visible)?;
        let y = self.fuse_graph(&mut g, &stages);
        let pred = self.decode_graph(&mut g, y, &stages.pos3, plan)?;
        let loss = g.mse(pred, target.tokens);
        Ok((g, loss))
    }

    /// `forward_pretrain`: masked reconstruction loss of an already degraded,
    /// input-sized image.
    pub fn forward_pretrain(&self, img: &Image, plan: &MaskPlan) -> Result<f64> {
        let (g, loss) = self.pretrain_graph(img, plan, false)?;
        Ok(g.value(loss).get(0, 0))
    }

    pub fn pretrain_loss_and_grads(&self, img: &Image, plan: &MaskPlan, norm_target: bool) -> Result<LossAndGrads> {
        let (g, loss) = self.pretrain_graph(img, plan, norm_target)?;
        Ok(LossAndGrads {
            loss: g.value(loss).get(0, 0),
            grads: g.backward(loss),
        })
    }

    /// Reconstructed masked units alongside the targets (for inspection).
    pub fn reconstruct(&self, img: &Image, plan: &MaskPlan) -> Result<(PatchSet, PatchSet)> {
        let units = self.units(img)?;
        let (visible, target) = masking::split_visible(&units, plan)?;
        let feats = self.encode_stages(&visible)?;
        let y = self.fuse_multiscale(&feats);
        Ok((self.decode_reconstruct(&y, &feats.pos3, plan)?, target))
    }

    fn finetune_graph<'g>(&'g self, img: &Image) -> Result<(Graph<'g>, Var)> {
        let units = self.units(img)?;
        let mut g = Graph::new(&self.params);
        let s = self.encode_graph(&mut g, &units)?;
        let f = g.mean_rows(s.x3);
        Ok((g, f))
    }

    /// `forward_finetune`: encoder on every unit, averaged stage-3 tokens (`1×d3`).
    pub fn forward_finetune(&self, img: &Image) -> Result<Tensor> {
        let (g, f) = self.finetune_graph(img)?;
        Ok(g.value(f).clone())
    }

    /// Gradient of `seed · forward_finetune(img)` with respect to every parameter.
    pub fn finetune_feature_grads(&self, img: &Image, seed: &Tensor) -> Result<Grads> {
        let (g, f) = self.finetune_graph(img)?;
        Ok(g.backward_with(f, seed.clone()))
    }

    fn head_on<'g>(&'g self, graph: (Graph<'g>, Var)) -> Result<ScoreTape<'g>> {
        let head = self
            .layout
            .head
            .ok_or_else(|| Error::Config("model has no scoring head".into()))?;
        let (mut g, f) = graph;
        let s = mlp(&mut g, f, &head);
        Ok(ScoreTape { graph: g, score: s })
    }

    /// Recorded forward pass of the scoring head on an image.
    pub fn score_tape(&self, img: &Image) -> Result<ScoreTape<'_>> {
        self.head_on(self.finetune_graph(img)?)
    }

    /// Recorded forward pass of the scoring head on a clip.
    pub fn video_score_tape(&self, clip: &[Image], t_patch: usize) -> Result<ScoreTape<'_>> {
        self.head_on(self.video_graph(clip, t_patch)?)
    }

    /// Scalar score of the head on the finetune features.
    pub fn score(&self, img: &Image) -> Result<f64> {
        Ok(self.score_tape(img)?.score())
    }

    /// Squared error of the score against `mos`, with gradients.
    pub fn score_loss_and_grads(&self, img: &Image, mos: f64) -> Result<(f64, f64, Grads)> {
        let tape = self.score_tape(img)?;
        let score = tape.score();
        let err = score - mos;
        Ok((score, err * err, tape.backward(2.0 * err)))
    }

    /// Patch-embedding weights (`patch*patch*3 × d1`) and bias.
    pub fn patch_embed(&self) -> (&Tensor, &Tensor) {
        let e = self.layout.embed;
        (self.params.get(e.w), self.params.get(e.b.expect("patch embedding has a bias")))
    }

    /// Rebuilds the parameter layout over a loaded store. Every expected name
    /// must be present with the expected shape.
    pub fn with_params(&self, params: ParamStore) -> Result<Model> {
        if params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: expected {}, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (id, name, t) in self.params.iter() {
            match params.id(name) {
                Some(other) if other == id && params.get(other).shape() == t.shape() => {}
                _ => return Err(Error::Data(format!("parameter {name} missing or reshaped"))),
            }
        }
        Ok(Model {
            params,
            ..self.clone()
        })
    }
}

/// Replicates 2-D patch-embedding weights over `t_patch` frames, scaled by
/// `1/t_patch`. Rows of the result are frame-major.
pub fn inflate_temporal(weights2d: &Tensor, t_patch: usize) -> Tensor {
    assert!(t_patch >= 1, "t_patch must be positive");
    let rows = weights2d.rows();
    let inv = 1.0 / t_patch as f64;
    Tensor::from_fn(rows * t_patch, weights2d.cols(), |r, c| weights2d.get(r % rows, c) * inv)
}

/// Embeds one spatio-temporal patch: `frames[t]` is the flattened patch of
/// frame `t`.
pub fn embed_clip_patch(frames: &[&[f64]], weights3d: &Tensor, bias: &Tensor) -> Tensor {
    let mut input = Vec::new();
    for f in frames {
        input.extend_from_slice(f);
    }
    let x = Tensor::from_vec(1, input.len(), input);
    let mut y = x.matmul(weights3d);
    y.add_assign(bias);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(fusion: FusionConfig, seed: u64) -> Model {
        build_autoencoder(&EncoderConfig::toy(), &fusion, &DecoderConfig::toy(), seed).unwrap()
    }

    fn pooled_fusion(stages: &[usize], fusion: FusionKind, projection: ProjectionKind) -> FusionConfig {
        FusionConfig {
            fuse_stages: stages.to_vec(),
            projection,
            fusion,
        }
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut r = rng::seeded(seed);
        Image::from_fn(size, size, crate::ColorSpace::Rgb, |_, _, _| r.random::<f64>())
    }

    #[test]
    fn config_validation() {
        let mut e = EncoderConfig::toy();
        e.input_size = 60;
        assert!(e.validate().is_err());
        let mut e = EncoderConfig::toy();
        e.stage_dims = [64, 48, 96];
        assert!(e.validate().is_err());
        let mut e = EncoderConfig::toy();
        e.stage_depths = [1, 0, 1];
        assert!(e.validate().is_err());
        assert!(pooled_fusion(&[3], FusionKind::Sum, ProjectionKind::Linear).validate().is_err());
        assert!(pooled_fusion(&[1, 1], FusionKind::Sum, ProjectionKind::Linear).validate().is_err());
        let d = DecoderConfig { heads: 3, ..DecoderConfig::toy() };
        assert!(d.validate().is_err());
    }

    #[test]
    fn deterministic_init() {
        let f = pooled_fusion(&[1, 2], FusionKind::WeightedPool, ProjectionKind::Mlp);
        assert_eq!(toy(f.clone(), 3).checksum(), toy(f.clone(), 3).checksum());
        assert_ne!(toy(f.clone(), 3).checksum(), toy(f, 4).checksum());
    }

    #[test]
    fn no_fusion_means_no_fusion_params() {
        let m = toy(FusionConfig::none(), 0);
        assert_eq!(m.params.count_with_prefix("fusion."), 0);
        assert!(m.params.id("decoder.embed.weight").is_some());
        let m = toy(pooled_fusion(&[1], FusionKind::Sum, ProjectionKind::Linear), 0);
        assert!(m.params.id("fusion.weights").is_none());
        assert!(m.params.id("decoder.embed.weight").is_none());
        assert_eq!(m.params.count_with_prefix("fusion."), 32 * 64 + 64 + 96 * 64 + 64);
    }

    #[test]
    fn merge_groups_cover_two_by_two_blocks() {
        let g = merge_groups(1, 4);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], alloc::vec![0, 1, 4, 5]);
        assert_eq!(g[3], alloc::vec![10, 11, 14, 15]);
        assert_eq!(merge_groups(2, 2), alloc::vec![alloc::vec![0, 1, 2, 3], alloc::vec![4, 5, 6, 7]]);
    }

    #[test]
    fn stage_shapes_follow_visible_count() {
        let m = toy(pooled_fusion(&[1, 2], FusionKind::WeightedPool, ProjectionKind::Linear), 1);
        let img = random_image(64, 2);
        let units = m.units(&img).unwrap();
        for ratio in [0.3, 0.75] {
            let plan = m.sample_mask(ratio, 9).unwrap();
            let (vis, _) = masking::split_visible(&units, &plan).unwrap();
            let f = m.encode_stages(&vis).unwrap();
            let n = vis.len();
            assert_eq!(f.x1.shape(), (16 * n, 32));
            assert_eq!(f.x2.shape(), (4 * n, 48));
            assert_eq!(f.x3.shape(), (n, 96));
            assert_eq!(f.pos3, vis.positions);
            assert!(f.x1.all_finite() && f.x2.all_finite() && f.x3.all_finite());
        }
    }

    #[test]
    fn stage3_is_permutation_equivariant() {
        let m = toy(FusionConfig::none(), 5);
        let units = m.units(&random_image(64, 6)).unwrap();
        let a = m.encode_stages(&units).unwrap();
        let perm = [2usize, 0, 3, 1];
        let b = m.encode_stages(&units.select(&perm)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..96 {
                assert!((b.x3.get(i, c) - a.x3.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_input_changes_features() {
        let m = toy(FusionConfig::none(), 5);
        let img = random_image(64, 7);
        let half = img.map_pixels(|p| p.map(|v| v * 0.5));
        let a = m.forward_finetune(&img).unwrap();
        let b = m.forward_finetune(&half).unwrap();
        assert!(a.all_finite() && b.all_finite());
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn empty_fusion_is_projected_stage3() {
        let m = toy(FusionConfig::none(), 8);
        let units = m.units(&random_image(64, 9)).unwrap();
        let f = m.encode_stages(&units).unwrap();
        let y = m.fuse_multiscale(&f);
        let w = m.params.get(m.params.id("decoder.embed.weight").unwrap());
        let b = m.params.get(m.params.id("decoder.embed.bias").unwrap());
        let mut want = f.x3.matmul(w);
        for r in 0..want.rows() {
            for c in 0..want.cols() {
                want.set(r, c, want.get(r, c) + b.get(0, c));
            }
        }
        assert_eq!(y, want);
    }

    #[test]
    fn degenerate_pool_weights_select_stage3() {
        let mut m = toy(pooled_fusion(&[1], FusionKind::WeightedPool, ProjectionKind::Linear), 10);
        let w = m.params.id("fusion.weights").unwrap();
        // stages are ordered [1, 3]
        *m.params.get_mut(w) = Tensor::from_vec(1, 2, alloc::vec![0.0, 1.0]);
        let units = m.units(&random_image(64, 11)).unwrap();
        let f = m.encode_stages(&units).unwrap();
        let y = m.fuse_multiscale(&f);
        let p3 = m.params.get(m.params.id("fusion.proj3.weight").unwrap());
        let b3 = m.params.get(m.params.id("fusion.proj3.bias").unwrap());
        let mut want = f.x3.matmul(p3);
        for r in 0..want.rows() {
            for c in 0..want.cols() {
                want.set(r, c, want.get(r, c) + b3.get(0, c));
            }
        }
        assert_eq!(y, want);
    }

    #[test]
    fn sum_fusion_matches_straight_line_recompute() {
        let m = toy(pooled_fusion(&[2], FusionKind::Sum, ProjectionKind::Mlp), 12);
        let units = m.units(&random_image(64, 13)).unwrap();
        let plan = m.sample_mask(0.5, 3).unwrap();
        let (vis, _) = masking::split_visible(&units, &plan).unwrap();
        let f = m.encode_stages(&vis).unwrap();
        let y = m.fuse_multiscale(&f);

        let p = |name: &str| m.params.get(m.params.id(name).unwrap()).clone();
        let mlp_apply = |x: &Tensor, prefix: &str| {
            let w1 = p(&format!("{prefix}.fc1.weight"));
            let b1 = p(&format!("{prefix}.fc1.bias"));
            let w2 = p(&format!("{prefix}.fc2.weight"));
            let b2 = p(&format!("{prefix}.fc2.bias"));
            let mut out = Tensor::zeros(x.rows(), w2.cols());
            for r in 0..x.rows() {
                let hidden: Vec<f64> = (0..w1.cols())
                    .map(|j| {
                        let z: f64 = (0..x.cols()).map(|k| x.get(r, k) * w1.get(k, j)).sum::<f64>() + b1.get(0, j);
                        crate::autodiff::gelu(z)
                    })
                    .collect();
                for j in 0..w2.cols() {
                    let z: f64 = hidden.iter().enumerate().map(|(k, h)| h * w2.get(k, j)).sum::<f64>() + b2.get(0, j);
                    out.set(r, j, z);
                }
            }
            out
        };
        let n = vis.len();
        let pooled2 = Tensor::from_fn(n, 48, |r, c| (0..4).map(|k| f.x2.get(r * 4 + k, c)).sum::<f64>() / 4.0);
        let want = mlp_apply(&pooled2, "fusion.proj2").zip_map(&mlp_apply(&f.x3, "fusion.proj3"), |a, b| a + b);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn decoder_covers_masked_positions() {
        let m = toy(pooled_fusion(&[1, 2], FusionKind::WeightedPool, ProjectionKind::Linear), 14);
        let img = random_image(64, 15);
        let plan = m.sample_mask(0.75, 4).unwrap();
        let (pred, target) = m.reconstruct(&img, &plan).unwrap();
        assert_eq!(pred.positions, plan.masked_positions());
        assert_eq!(pred.tokens.shape(), target.tokens.shape());
        assert!(pred.tokens.all_finite());
        assert!(pred.tokens.data().iter().all(|v| v.abs() < 1e3));
        let rows: Vec<&[f64]> = (0..pred.len()).map(|r| pred.tokens.row(r)).collect();
        assert!(rows.windows(2).any(|w| w[0] != w[1]), "positional encoding should separate mask tokens");
        let loss = m.forward_pretrain(&img, &plan).unwrap();
        assert!((loss - masking::masked_mse(&pred, &target, &plan).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_ignores_visible_target_changes() {
        // the degraded image is both input and target; perturbing only the
        // target side at visible units cannot be expressed through the image
        // alone, so compare against the loss recomputed from predictions
        let m = toy(FusionConfig::none(), 16);
        let img = random_image(64, 17);
        let plan = m.sample_mask(0.75, 5).unwrap();
        let (pred, target) = m.reconstruct(&img, &plan).unwrap();
        let units = m.units(&img).unwrap();
        let mut perturbed = units.clone();
        for p in plan.visible_positions() {
            perturbed.tokens.row_mut(p).iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        let (_, target2) = masking::split_visible(&perturbed, &plan).unwrap();
        assert_eq!(target, target2);
        assert_eq!(
            masking::masked_mse(&pred, &target, &plan).unwrap(),
            masking::masked_mse(&pred, &target2, &plan).unwrap()
        );
    }

    #[test]
    fn finetune_touches_encoder_only() {
        let mut m = toy(pooled_fusion(&[1, 2], FusionKind::WeightedPool, ProjectionKind::Mlp), 18);
        m.attach_head(32, 1);
        let img = random_image(64, 19);
        let seed = Tensor::full(1, 96, 1.0);
        let grads = m.finetune_feature_grads(&img, &seed).unwrap();
        for id in m.pretrain_only_params() {
            assert!(grads.get(id).is_none(), "{} received a gradient", m.params.name(id));
        }
        assert_eq!(m.forward_finetune(&img).unwrap().shape(), (1, 96));
        assert_eq!(m.forward_finetune(&img).unwrap(), m.forward_finetune(&img).unwrap());
        let (_, _, g) = m.score_loss_and_grads(&img, 3.0).unwrap();
        for id in m.pretrain_only_params() {
            assert!(g.get(id).is_none());
        }
        assert!(g.get(m.params.id("head.fc2.bias").unwrap()).is_some());
    }

    #[test]
    fn inflation_keeps_static_embeddings() {
        let mut r = rng::seeded(20);
        let w = Tensor::from_fn(12, 5, |_, _| r.random_range(-1.0..1.0));
        let bias = Tensor::from_fn(1, 5, |_, _| r.random_range(-1.0..1.0));
        assert_eq!(inflate_temporal(&w, 1), w);
        let frame: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let w3 = inflate_temporal(&w, 4);
        let clip = embed_clip_patch(&[&frame, &frame, &frame, &frame], &w3, &bias);
        let image = embed_clip_patch(&[&frame], &w, &bias);
        assert!(clip.max_abs_diff(&image) < 1e-6);

        let frames: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| r.random::<f64>()).collect()).collect();
        let w2 = inflate_temporal(&w, 2);
        let got = embed_clip_patch(&[&frames[0], &frames[1]], &w2, &bias);
        for c in 0..5 {
            let mut want = bias.get(0, c);
            for (t, f) in frames.iter().enumerate() {
                for (k, v) in f.iter().enumerate() {
                    want += v * w.get(k, c) / 2.0;
                    let _ = t;
                }
            }
            assert!((got.get(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn static_clip_matches_still_image() {
        let m = toy(FusionConfig::none(), 21);
        let img = random_image(64, 22);
        let still = m.forward_finetune(&img).unwrap();
        let clip = alloc::vec![img.clone(); 4];
        for t_patch in [1, 2, 4] {
            assert!(m.forward_video(&clip, t_patch).unwrap().max_abs_diff(&still) < 1e-9);
        }
    }

    #[test]
    fn tube_embedding_equals_mean_frame_embedding() {
        let m = toy(FusionConfig::none(), 23);
        let (a, b) = (random_image(64, 24), random_image(64, 25));
        let mean = Image::from_fn(64, 64, crate::ColorSpace::Rgb, |y, x, c| 0.5 * (a.get(y, x, c) + b.get(y, x, c)));
        let via_clip = m.forward_video(&[a.clone(), b.clone()], 2).unwrap();
        assert!(via_clip.max_abs_diff(&m.forward_finetune(&mean).unwrap()) < 1e-9);

        let (w, bias) = m.patch_embed();
        let pa = masking::patchify(&a, 8).unwrap();
        let pb = masking::patchify(&b, 8).unwrap();
        let pm = masking::patchify(&mean, 8).unwrap();
        let w3 = inflate_temporal(w, 2);
        for r in [0, 17, 63] {
            let tube = embed_clip_patch(&[pa.tokens.row(r), pb.tokens.row(r)], &w3, bias);
            let flat = embed_clip_patch(&[pm.tokens.row(r)], w, bias);
            assert!(tube.max_abs_diff(&flat) < 1e-12);
        }
    }

    #[test]
    fn with_params_rejects_foreign_layouts() {
        let a = toy(FusionConfig::none(), 0);
        let b = toy(pooled_fusion(&[1], FusionKind::Sum, ProjectionKind::Linear), 0);
        assert!(a.with_params(b.params.clone()).is_err());
        assert_eq!(a.with_params(a.params.clone()).unwrap().checksum(), a.checksum());
    }
}
