//! Patch grids, random masks and the masked reconstruction loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image, CHANNELS};
use crate::rng;
use crate::tensor::Tensor;

/// Flattened patches (`patch*patch*3` values each, row-major with interleaved
/// channels) tagged with their row-major grid index.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch: usize,
    pub tokens: Tensor,
    pub positions: Vec<usize>,
}

impl PatchSet {
    pub fn new(patch: usize, tokens: Tensor, positions: Vec<usize>) -> Result<Self> {
        if tokens.rows() != positions.len() {
            return Err(Error::param("positions", "one position per token"));
        }
        if tokens.cols() != patch * patch * CHANNELS {
            return Err(Error::param("tokens", "token width must be patch*patch*3"));
        }
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("positions", "duplicate position"));
        }
        Ok(PatchSet { patch, tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the patches at the listed row indices, in that order.
    pub fn select(&self, rows: &[usize]) -> PatchSet {
        let tokens = Tensor::from_fn(rows.len(), self.tokens.cols(), |r, c| self.tokens.get(rows[r], c));
        PatchSet {
            patch: self.patch,
            tokens,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        }
    }

    /// Concatenates two disjoint patch sets.
    pub fn concat(&self, other: &PatchSet) -> Result<PatchSet> {
        if self.patch != other.patch {
            return Err(Error::param("patch", "patch sizes differ"));
        }
        let mut data = self.tokens.data().to_vec();
        data.extend_from_slice(other.tokens.data());
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        PatchSet::new(
            self.patch,
            Tensor::from_vec(self.len() + other.len(), self.tokens.cols(), data),
            positions,
        )
    }
}

/// Splits an image into row-major non-overlapping `patch×patch` tiles.
pub fn patchify(img: &Image, patch: usize) -> Result<PatchSet> {
    if patch == 0 || img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::param("patch", "image dims must be divisible by the patch size"));
    }
    let (gh, gw) = (img.height() / patch, img.width() / patch);
    let width = patch * patch * CHANNELS;
    let mut data = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * img.width() + px * patch) * CHANNELS;
                data.extend_from_slice(&img.data()[start..start + patch * CHANNELS]);
            }
        }
    }
    Ok(PatchSet {
        patch,
        tokens: Tensor::from_vec(gh * gw, width, data),
        positions: (0..gh * gw).collect(),
    })
}

/// Places every patch at its position. All positions of the grid must be present.
pub fn unpatchify(patches: &PatchSet, height: usize, width: usize, space: ColorSpace) -> Result<Image> {
    let p = patches.patch;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::param("patch", "image dims must be divisible by the patch size"));
    }
    let (gh, gw) = (height / p, width / p);
    let mut seen = vec![false; gh * gw];
    for &pos in &patches.positions {
        if pos >= gh * gw || seen[pos] {
            return Err(Error::param("positions", "position outside grid or repeated"));
        }
        seen[pos] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::param("positions", "missing positions"));
    }
    let mut data = vec![0.0; height * width * CHANNELS];
    for (row, &pos) in patches.positions.iter().enumerate() {
        let (py, px) = (pos / gw, pos % gw);
        let token = patches.tokens.row(row);
        for y in 0..p {
            let dst = ((py * p + y) * width + px * p) * CHANNELS;
            data[dst..dst + p * CHANNELS].copy_from_slice(&token[y * p * CHANNELS..(y + 1) * p * CHANNELS]);
        }
    }
    Image::new(height, width, space, data)
}

/// A boolean mask over a patch grid; `true` marks a masked patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ratio: f64,
    pub mask: Vec<bool>,
    pub seed: u64,
}

/// Number of masked patches for `n` patches at `ratio`, rounding half away from zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    libm::round(ratio * n as f64) as usize
}

/// Uniformly random subset of `round(ratio * N)` masked patches.
pub fn sample_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param("ratio", "masking ratio must lie in (0, 1)"));
    }
    let n = grid_h * grid_w;
    let count = masked_count(n, ratio);
    if count == 0 || count >= n {
        return Err(Error::param(
            "ratio",
            alloc::format!("ratio {ratio} masks {count} of {n} patches; need at least one masked and one visible"),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut mask = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, count) {
        mask[i] = true;
    }
    Ok(MaskPlan {
        grid_h,
        grid_w,
        ratio,
        mask,
        seed,
    })
}

impl MaskPlan {
    /// A plan from an explicit mask.
    pub fn from_mask(grid_h: usize, grid_w: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid_h * grid_w {
            return Err(Error::param("mask", "length must equal grid size"));
        }
        let ratio = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
        Ok(MaskPlan {
            grid_h,
            grid_w,
            ratio,
            mask,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// The same mask on a grid `factor` times finer along each axis.
    pub fn expand(&self, factor: usize) -> MaskPlan {
        let (fh, fw) = (self.grid_h * factor, self.grid_w * factor);
        let mask = (0..fh * fw)
            .map(|i| self.mask[(i / fw / factor) * self.grid_w + (i % fw) / factor])
            .collect();
        MaskPlan {
            grid_h: fh,
            grid_w: fw,
            ratio: self.ratio,
            mask,
            seed: self.seed,
        }
    }
}

/// Partitions a full patch set into visible and masked subsets, each in
/// ascending position order.
pub fn split_visible(patches: &PatchSet, plan: &MaskPlan) -> Result<(PatchSet, PatchSet)> {
    if patches.len() != plan.len() {
        return Err(Error::param("patches", "patch count must equal the grid size"));
    }
    let mut row_of = vec![usize::MAX; plan.len()];
    for (row, &pos) in patches.positions.iter().enumerate() {
        if pos >= plan.len() || row_of[pos] != usize::MAX {
            return Err(Error::param("positions", "position outside grid or repeated"));
        }
        row_of[pos] = row;
    }
    let rows = |positions: Vec<usize>| positions.into_iter().map(|p| row_of[p]).collect::<Vec<_>>();
    Ok((
        patches.select(&rows(plan.visible_positions())),
        patches.select(&rows(plan.masked_positions())),
    ))
}

/// Mean squared error over the masked patches and all their values.
///
/// `pred` and `target` must both list exactly the masked positions of
/// `plan`, in the same order.
pub fn masked_mse(pred: &PatchSet, target: &PatchSet, plan: &MaskPlan) -> Result<f64> {
    check_masked_positions(pred, plan)?;
    if pred.positions != target.positions || pred.tokens.shape() != target.tokens.shape() {
        return Err(Error::param("target", "prediction and target positions differ"));
    }
    let n = pred.tokens.len() as f64;
    Ok(pred
        .tokens
        .data()
        .iter()
        .zip(target.tokens.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub(crate) fn check_masked_positions(set: &PatchSet, plan: &MaskPlan) -> Result<()> {
    let mut got = set.positions.clone();
    got.sort_unstable();
    if got != plan.masked_positions() {
        return Err(Error::param("positions", "patches must cover exactly the masked positions"));
    }
    Ok(())
}

/// Normalizes each patch to zero mean and unit variance (optional target mode).
pub fn normalize_patches(set: &PatchSet) -> PatchSet {
    let mut tokens = set.tokens.clone();
    for r in 0..tokens.rows() {
        let row = tokens.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + 1e-6);
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    PatchSet {
        patch: set.patch,
        tokens,
        positions: set.positions.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::seeded(seed);
        Image::from_fn(h, w, ColorSpace::Rgb, |_, _, _| r.random::<f64>())
    }

    #[test]
    fn patch_counts_and_roundtrip() {
        let img = random_image(224, 224, 1);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.len(), 196);
        assert_eq!(unpatchify(&p, 224, 224, ColorSpace::Rgb).unwrap(), img);
        assert!(patchify(&img, 15).is_err());
    }

    #[test]
    fn patch_one_matches_direct_indexing() {
        let img = random_image(2, 2, 3);
        let p = patchify(&img, 1).unwrap();
        for (i, (y, x)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            assert_eq!(p.positions[i], i);
            assert_eq!(p.tokens.row(i), &img.pixel(y, x)[..]);
        }
    }

    #[test]
    fn unpatchify_placement() {
        let img = random_image(8, 8, 4);
        let single = patchify(&img, 8).unwrap();
        assert_eq!(unpatchify(&single, 8, 8, ColorSpace::Rgb).unwrap(), img);

        let p = patchify(&img, 4).unwrap();
        let shuffled = p.select(&[3, 1, 0, 2]);
        assert_eq!(unpatchify(&shuffled, 8, 8, ColorSpace::Rgb).unwrap(), img);
        let missing = p.select(&[0, 1, 2]);
        assert!(unpatchify(&missing, 8, 8, ColorSpace::Rgb).is_err());
    }

    #[test]
    fn mask_counts_and_determinism() {
        let m = sample_mask(14, 14, 0.75, 0).unwrap();
        assert_eq!(m.masked_positions().len(), 147);
        assert_eq!(m, sample_mask(14, 14, 0.75, 0).unwrap());
        assert!(sample_mask(2, 2, 0.1, 0).is_err());
        assert!(sample_mask(2, 2, 0.95, 0).is_err());
        assert!(sample_mask(2, 2, 0.0, 0).is_err());
        assert!(sample_mask(2, 2, 1.0, 0).is_err());
    }

    #[test]
    fn mask_positions_are_uniform() {
        let mut hits = [0usize; 16];
        let seeds = 10_000;
        for seed in 0..seeds {
            let m = sample_mask(4, 4, 0.5, seed).unwrap();
            assert_eq!(m.masked_positions().len(), 8);
            for p in m.masked_positions() {
                hits[p] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / seeds as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn cardinality_grid() {
        for n_side in [2usize, 4, 7, 14] {
            for ratio in [0.3, 0.6, 0.75, 0.9] {
                let n = n_side * n_side;
                let want = (ratio * n as f64).round() as usize;
                match sample_mask(n_side, n_side, ratio, 5) {
                    Ok(m) => assert_eq!(m.masked_positions().len(), want),
                    Err(_) => assert!(want == 0 || want == n),
                }
            }
        }
    }

    #[test]
    fn split_examples() {
        let img = random_image(4, 4, 6);
        let p = patchify(&img, 2).unwrap();
        let plan = MaskPlan::from_mask(2, 2, alloc::vec![true, false, false, true]).unwrap();
        let (vis, masked) = split_visible(&p, &plan).unwrap();
        assert_eq!(masked.positions, alloc::vec![0, 3]);
        assert_eq!(masked.tokens.row(0), p.tokens.row(0));
        assert_eq!(masked.tokens.row(1), p.tokens.row(3));
        let rebuilt = unpatchify(&vis.concat(&masked).unwrap(), 4, 4, ColorSpace::Rgb).unwrap();
        assert_eq!(rebuilt, img);

        let plan = MaskPlan::from_mask(2, 2, alloc::vec![false, false, true, false]).unwrap();
        assert_eq!(split_visible(&p, &plan).unwrap().1.len(), 1);
        let wrong = MaskPlan::from_mask(3, 3, alloc::vec![false; 9]).unwrap();
        assert!(split_visible(&p, &wrong).is_err());
    }

    #[test]
    fn masked_mse_examples() {
        let plan = MaskPlan::from_mask(1, 2, alloc::vec![true, false]).unwrap();
        let t = PatchSet::new(1, Tensor::full(1, 3, 0.2), alloc::vec![0]).unwrap();
        assert_eq!(masked_mse(&t, &t, &plan).unwrap(), 0.0);
        let p = PatchSet::new(1, Tensor::full(1, 3, 0.7), alloc::vec![0]).unwrap();
        assert!((masked_mse(&p, &t, &plan).unwrap() - 0.25).abs() < 1e-15);
        let elsewhere = PatchSet::new(1, Tensor::full(1, 3, 0.7), alloc::vec![1]).unwrap();
        assert!(masked_mse(&elsewhere, &t, &plan).is_err());
    }

    #[test]
    fn masked_mse_matches_elementwise_sum() {
        let mut r = rng::seeded(8);
        let plan = MaskPlan::from_mask(2, 3, alloc::vec![true, false, true, false, true, false]).unwrap();
        let make = |r: &mut rng::SeededRng| {
            PatchSet::new(2, Tensor::from_fn(3, 12, |_, _| r.random::<f64>()), alloc::vec![0, 2, 4]).unwrap()
        };
        let (pred, target) = (make(&mut r), make(&mut r));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..3 {
            for j in 0..12 {
                let d = pred.tokens.get(i, j) - target.tokens.get(i, j);
                total += d * d;
                count += 1;
            }
        }
        assert!((masked_mse(&pred, &target, &plan).unwrap() - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn expanded_mask_covers_blocks() {
        let plan = MaskPlan::from_mask(2, 2, alloc::vec![true, false, false, true]).unwrap();
        let fine = plan.expand(2);
        assert_eq!(fine.grid_h, 4);
        let rows: Vec<Vec<bool>> = fine.mask.chunks(4).map(|c| c.to_vec()).collect();
        assert_eq!(rows[0], alloc::vec![true, true, false, false]);
        assert_eq!(rows[3], alloc::vec![false, false, true, true]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn patchify_roundtrip(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
            let img = random_image(gh * p, gw * p, seed);
            let patches = patchify(&img, p).unwrap();
            prop_assert_eq!(unpatchify(&patches, gh * p, gw * p, ColorSpace::Rgb).unwrap(), img);
        }

        #[test]
        fn visible_target_changes_do_not_move_loss(seed in any::<u64>(), noise in 0.0f64..1.0) {
            let img = random_image(8, 8, seed);
            let recon = random_image(8, 8, seed ^ 1);
            let plan = sample_mask(4, 4, 0.5, seed).unwrap();
            let (_, target) = split_visible(&patchify(&img, 2).unwrap(), &plan).unwrap();
            let (_, pred) = split_visible(&patchify(&recon, 2).unwrap(), &plan).unwrap();
            let base = masked_mse(&pred, &target, &plan).unwrap();

            let mut perturbed = patchify(&img, 2).unwrap();
            for pos in plan.visible_positions() {
                perturbed.tokens.row_mut(pos).iter_mut().for_each(|v| *v = noise);
            }
            let (_, target2) = split_visible(&perturbed, &plan).unwrap();
            prop_assert_eq!(masked_mse(&pred, &target2, &plan).unwrap(), base);
        }
    }
}
