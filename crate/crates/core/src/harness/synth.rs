//! Synthetic batches: isotropic unit embeddings, random rectangles, and
//! random full binary trees.

use std::ops::RangeInclusive;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{l2_normalize, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::region::{sample_masks, PatchGrid, RegionMaskSet};
use crate::similarity::{ImageSample, MiniBatch, TextSample};
use crate::tree::{parse_bracketed, ParseTree};

/// Resampling budget when a draw produces a cancelling (zero-norm) sum.
const DEGENERATE_RETRIES: usize = 256;
/// Rejection-sampling budget for the tree depth constraint.
const DEPTH_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Pairs per batch, `C`.
    pub batch_size: usize,
    /// Patch grid `(height, width)`; `N = height * width`.
    pub grid: (usize, usize),
    /// Tokens per description; each token is one leaf.
    pub tokens: usize,
    pub dim: usize,
    /// Masks per image, `M`.
    pub masks: usize,
    /// Allowed depth of the deepest leaf (root at depth 0).
    pub depth_range: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grid: (7, 7),
            tokens: 6,
            dim: 16,
            masks: 10,
            depth_range: (1, usize::MAX),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.grid.0, self.grid.1, self.tokens, self.dim, self.masks];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        let (lo, hi) = self.depth_range;
        let (min_depth, max_depth) = depth_limits(self.tokens);
        if lo > hi || hi < min_depth || lo > max_depth {
            return Err(Error::Config(format!(
                "depth range {lo}..={hi} is unreachable with {} leaves ({min_depth}..={max_depth})",
                self.tokens
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Shallowest and deepest full binary tree over `leaves` leaves.
fn depth_limits(leaves: usize) -> (usize, usize) {
    if leaves == 1 {
        (1, 1)
    } else {
        ((leaves as f64).log2().ceil() as usize, leaves - 1)
    }
}

fn unit_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(u) = l2_normalize(&v) {
                break u;
            }
        })
        .collect()
}

const PHRASE_TAGS: [&str; 3] = ["NP", "VP", "PP"];

/// Random full binary tree over `leaves` words with uniform split points.
pub fn random_tree<R: Rng>(rng: &mut R, leaves: usize, depth_range: (usize, usize)) -> Result<ParseTree> {
    fn build<R: Rng>(rng: &mut R, lo: usize, hi: usize, label: &str, out: &mut String) {
        if hi - lo == 1 {
            out.push_str(&format!("w{lo}"));
            return;
        }
        let split = rng.random_range(lo + 1..hi);
        out.push('(');
        out.push_str(label);
        for (a, b) in [(lo, split), (split, hi)] {
            out.push(' ');
            let tag = *PHRASE_TAGS.choose(rng).expect("non-empty");
            build(rng, a, b, tag, out);
        }
        out.push(')');
    }
    let range: RangeInclusive<usize> = depth_range.0..=depth_range.1;
    for _ in 0..DEPTH_RETRIES {
        let mut text = String::new();
        if leaves == 1 {
            text.push_str("(S w0)");
        } else {
            build(rng, 0, leaves, "S", &mut text);
        }
        let tree = parse_bracketed(&text)?;
        if range.contains(&tree.depth()) {
            return Ok(tree);
        }
    }
    Err(Error::Config(format!(
        "no tree with {leaves} leaves and depth in {range:?} after {DEPTH_RETRIES} draws"
    )))
}

fn masked_sums_nonzero(patches: &EmbeddingMatrix, masks: &RegionMaskSet) -> bool {
    masks
        .masks()
        .iter()
        .all(|m| patches.masked_sum(m).is_ok_and(|s| l2_normalize(&s).is_ok()))
}

fn sample_image<R: Rng>(rng: &mut R, spec: &SyntheticSpec, grid: PatchGrid) -> Result<ImageSample> {
    for _ in 0..DEGENERATE_RETRIES {
        let patches = EmbeddingMatrix::from_rows(&unit_rows(rng, grid.patches(), spec.dim))?;
        let masks = sample_masks(grid, spec.masks, rng);
        if !masked_sums_nonzero(&patches, &masks) {
            continue;
        }
        if let Ok(global) = patches.mean_direction() {
            return Ok(ImageSample {
                patches,
                masks,
                global,
            });
        }
    }
    Err(Error::Config("could not draw an image without cancelling mask sums".into()))
}

fn sample_text<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Result<TextSample> {
    let tree = random_tree(rng, spec.tokens, spec.depth_range)?;
    for _ in 0..DEGENERATE_RETRIES {
        let tokens = EmbeddingMatrix::from_rows(&unit_rows(rng, spec.tokens, spec.dim))?;
        if let Ok(global) = tokens.mean_direction() {
            return Ok(TextSample::new(tokens, tree, global));
        }
    }
    Err(Error::Config("could not draw tokens with a nonzero mean".into()))
}

/// Draws a batch; identical specs give identical batches.
///
/// With `dim >= 2` the Gaussian draws never cancel; in one dimension rows
/// are `+-1` and cancelling draws are resampled.
pub fn gen_synthetic_batch(spec: &SyntheticSpec) -> Result<MiniBatch> {
    spec.validate()?;
    let grid = PatchGrid::new(spec.grid.0, spec.grid.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = (0..spec.batch_size)
        .map(|_| Ok((sample_image(&mut rng, spec, grid)?, sample_text(&mut rng, spec)?)))
        .collect::<Result<Vec<_>>>()?;
    MiniBatch::new(pairs)
}

/// Distribution over instance shapes used by the verification suites: each
/// trial draws its own mask count, leaf count and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceDistribution {
    pub batch_size: usize,
    pub grid: (usize, usize),
    pub masks: (usize, usize),
    pub tokens: (usize, usize),
    pub dims: Vec<usize>,
}

impl Default for InstanceDistribution {
    /// `C = 2`, `M` in 1..=12, up to 8 leaves (at most 15 nodes), `D` in
    /// {4, 64}.
    fn default() -> Self {
        Self {
            batch_size: 2,
            grid: (4, 4),
            masks: (1, 12),
            tokens: (1, 8),
            dims: vec![4, 64],
        }
    }
}

impl InstanceDistribution {
    pub fn sample(&self, seed: u64) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        SyntheticSpec {
            batch_size: self.batch_size,
            grid: self.grid,
            tokens: rng.random_range(self.tokens.0..=self.tokens.1),
            dim: *self.dims.choose(&mut rng).unwrap_or(&4),
            masks: rng.random_range(self.masks.0..=self.masks.1),
            depth_range: (1, usize::MAX),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::compute_s0;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(gen_synthetic_batch(&spec).unwrap(), gen_synthetic_batch(&spec).unwrap());
        assert_ne!(
            gen_synthetic_batch(&spec).unwrap(),
            gen_synthetic_batch(&spec.with_seed(1)).unwrap()
        );
    }

    #[test]
    fn one_dimensional_embeddings_are_signs() {
        let spec = SyntheticSpec {
            dim: 1,
            grid: (2, 2),
            ..SyntheticSpec::default()
        };
        let batch = gen_synthetic_batch(&spec).unwrap();
        for (image, text) in batch.pairs() {
            for r in 0..image.patches.rows() {
                assert_eq!(image.patches.row(r)[0].abs(), 1.0);
            }
            for r in 0..text.tokens.rows() {
                assert_eq!(text.tokens.row(r)[0].abs(), 1.0);
            }
        }
        compute_s0(&batch).unwrap();
    }

    #[test]
    fn shape_contract() {
        let spec = SyntheticSpec {
            batch_size: 2,
            masks: 3,
            tokens: 4,
            ..SyntheticSpec::default()
        };
        let s0 = compute_s0(&gen_synthetic_batch(&spec).unwrap()).unwrap();
        assert_eq!(s0.size(), 2);
        for i in 0..2 {
            assert_eq!(s0.masks(i), 3);
            assert_eq!(s0.leaves(i), 4);
        }
    }

    #[test]
    fn depth_range_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = random_tree(&mut rng, 8, (3, 4)).unwrap();
            assert!((3..=4).contains(&t.depth()));
            assert_eq!(t.nodes().len(), 15);
        }
        let bad = SyntheticSpec {
            tokens: 8,
            depth_range: (8, 9),
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
